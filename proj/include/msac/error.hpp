#pragma once

#include <stdexcept>
#include <string>

namespace msac {

/// Broad failure class. Maps onto CLI exit codes (config 1, data 2, numerical 3).
enum class ErrorCategory { kConfig = 1, kData = 2, kNumerical = 3 };

/// Exception carrying a stable short code ("utterance_too_short",
/// "invalid_waveform", ...) alongside a readable message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), category_(category), code_(std::move(code)) {}

  ErrorCategory category() const noexcept { return category_; }
  const std::string& code() const noexcept { return code_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
  std::string code_;
};

inline Error config_error(const std::string& message) {
  return Error(ErrorCategory::kConfig, "config_error", message);
}
inline Error data_error(const std::string& code, const std::string& message) {
  return Error(ErrorCategory::kData, code, message);
}
inline Error numerical_error(const std::string& message) {
  return Error(ErrorCategory::kNumerical, "numerical_failure", message);
}

}  // namespace msac
