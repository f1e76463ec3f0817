#pragma once

#include <stdexcept>
#include <string>

namespace ohf {

// Error taxonomy shared by the library and the CLI. The CLI maps kinds to
// stable process exit codes (see tools/).
enum class ErrorKind {
  Config,     // invalid configuration, bad CLI usage, spec/checkpoint mismatch
  Dimension,  // tensor shape mismatch
  Contract,   // API precondition violated
  Parse,      // malformed stack notation / config text
  Format,     // malformed binary file (checkpoint)
  Data,       // missing or invalid input data
  Io,         // output I/O failure
  Numeric,    // NaN/Inf detected where finite values are required
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

[[noreturn]] inline void fail_config(const std::string& msg) { fail(ErrorKind::Config, msg); }
[[noreturn]] inline void fail_dim(const std::string& msg) { fail(ErrorKind::Dimension, msg); }
[[noreturn]] inline void fail_contract(const std::string& msg) { fail(ErrorKind::Contract, msg); }
[[noreturn]] inline void fail_parse(const std::string& msg) { fail(ErrorKind::Parse, msg); }
[[noreturn]] inline void fail_format(const std::string& msg) { fail(ErrorKind::Format, msg); }
[[noreturn]] inline void fail_data(const std::string& msg) { fail(ErrorKind::Data, msg); }
[[noreturn]] inline void fail_io(const std::string& msg) { fail(ErrorKind::Io, msg); }
[[noreturn]] inline void fail_numeric(const std::string& msg) { fail(ErrorKind::Numeric, msg); }

}  // namespace ohf
