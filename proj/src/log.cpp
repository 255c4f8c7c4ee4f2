#include "muse/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>

namespace muse {

namespace {

LogLevel from_env() {
  const char* v = std::getenv("MUSE_LOG");
  if (!v) return LogLevel::Info;
  const std::string s(v);
  if (s == "error") return LogLevel::Error;
  if (s == "warn") return LogLevel::Warn;
  if (s == "debug") return LogLevel::Debug;
  return LogLevel::Info;
}

std::atomic<int>& level_slot() {
  static std::atomic<int> level{static_cast<int>(from_env())};
  return level;
}

const char* name(LogLevel l) {
  switch (l) {
    case LogLevel::Error: return "error";
    case LogLevel::Warn: return "warn";
    case LogLevel::Info: return "info";
    case LogLevel::Debug: return "debug";
  }
  return "?";
}

}  // namespace

LogLevel log_level() { return static_cast<LogLevel>(level_slot().load()); }

void set_log_level(LogLevel level) { level_slot().store(static_cast<int>(level)); }

void log_message(LogLevel level, const std::string& message) {
  if (static_cast<int>(level) > level_slot().load()) return;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[" << name(level) << "] " << message << "\n";
}

}  // namespace muse
