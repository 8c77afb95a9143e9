#pragma once

#include <cstdlib>
#include <iostream>
#include <string>

namespace adfq {

// ADFQ_LOG = quiet | warn | info | debug (default warn). Everything goes to stderr.
enum class LogLevel { Quiet = 0, Warn = 1, Info = 2, Debug = 3 };

inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("ADFQ_LOG");
    const std::string v = env != nullptr ? env : "";
    if (v == "quiet") return LogLevel::Quiet;
    if (v == "info") return LogLevel::Info;
    if (v == "debug") return LogLevel::Debug;
    return LogLevel::Warn;
  }();
  return level;
}

inline void log_at(LogLevel level, const char* tag, const std::string& msg) {
  if (static_cast<int>(level) <= static_cast<int>(log_level())) std::cerr << "[" << tag << "] " << msg << "\n";
}

inline void log_warn(const std::string& msg) { log_at(LogLevel::Warn, "warn", msg); }
inline void log_info(const std::string& msg) { log_at(LogLevel::Info, "info", msg); }
inline void log_debug(const std::string& msg) { log_at(LogLevel::Debug, "debug", msg); }

}  // namespace adfq
