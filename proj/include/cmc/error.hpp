#pragma once

#include <stdexcept>
#include <string>

namespace cmc {

// Coarse failure class. The CLI maps these onto process exit codes.
enum class ErrorKind { config, data, runtime };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(const std::string& what) {
  throw Error(ErrorKind::runtime, what);
}

[[noreturn]] inline void fail_data(const std::string& what) {
  throw Error(ErrorKind::data, what);
}

[[noreturn]] inline void fail_config(const std::string& what) {
  throw Error(ErrorKind::config, what);
}

}  // namespace cmc
