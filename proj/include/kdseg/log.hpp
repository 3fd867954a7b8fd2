#pragma once

#include <sstream>
#include <string>

namespace kdseg {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

// Level comes from the KDSEG_LOG env var (error|info|debug), default info.
LogLevel log_level();
void set_log_level(LogLevel level);
void log_message(LogLevel level, const std::string& msg);

namespace detail {
template <class... Args>
std::string log_format(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

template <class... Args>
void log_error(Args&&... args) {
  log_message(LogLevel::Error, detail::log_format(std::forward<Args>(args)...));
}

template <class... Args>
void log_info(Args&&... args) {
  if (log_level() >= LogLevel::Info)
    log_message(LogLevel::Info, detail::log_format(std::forward<Args>(args)...));
}

template <class... Args>
void log_debug(Args&&... args) {
  if (log_level() >= LogLevel::Debug)
    log_message(LogLevel::Debug, detail::log_format(std::forward<Args>(args)...));
}

}  // namespace kdseg
