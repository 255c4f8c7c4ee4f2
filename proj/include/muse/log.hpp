#pragma once

// Plain-text structured logging to stderr. Verbosity comes from the MUSE_LOG
// environment variable: error, warn, info (default) or debug.

#include <string>

namespace muse {

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

LogLevel log_level();
void set_log_level(LogLevel level);
void log_message(LogLevel level, const std::string& message);

inline void log_info(const std::string& m) { log_message(LogLevel::Info, m); }
inline void log_debug(const std::string& m) { log_message(LogLevel::Debug, m); }
inline void log_warn(const std::string& m) { log_message(LogLevel::Warn, m); }

}  // namespace muse
