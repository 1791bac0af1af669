#pragma once

#include <stdexcept>
#include <string>

namespace tq {

// Error kinds map 1:1 onto CLI exit codes.
enum class ErrKind : int { usage = 1, data = 2, integrity = 3, numeric = 4 };

struct Error : std::runtime_error {
    ErrKind kind;
    Error(ErrKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

inline Error usage_error(const std::string& msg) { return Error(ErrKind::usage, msg); }
inline Error data_error(const std::string& msg) { return Error(ErrKind::data, msg); }
inline Error integrity_error(const std::string& msg) { return Error(ErrKind::integrity, msg); }
inline Error numeric_error(const std::string& msg) { return Error(ErrKind::numeric, msg); }

}  // namespace tq
