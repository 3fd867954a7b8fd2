#include "kdseg/log.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace kdseg {

namespace {

LogLevel level_from_env() {
  const char* v = std::getenv("KDSEG_LOG");
  if (v == nullptr) return LogLevel::Info;
  if (std::strcmp(v, "error") == 0) return LogLevel::Error;
  if (std::strcmp(v, "debug") == 0) return LogLevel::Debug;
  return LogLevel::Info;
}

LogLevel g_level = level_from_env();

const char* level_name(LogLevel level) {
  switch (level) {
    case LogLevel::Error: return "error";
    case LogLevel::Debug: return "debug";
    default: return "info";
  }
}

}  // namespace

LogLevel log_level() { return g_level; }

void set_log_level(LogLevel level) { g_level = level; }

void log_message(LogLevel level, const std::string& msg) {
  std::fprintf(stderr, "[kdseg %s] %s\n", level_name(level), msg.c_str());
}

}  // namespace kdseg
