#pragma once

#include <stdexcept>
#include <string>

namespace mist {

// Error categories map 1:1 onto CLI exit codes (see tools/mist.cpp).
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file content (bad magic, truncation, version mismatch).
class FormatError : public IoError {
public:
  explicit FormatError(const std::string& msg) : IoError(msg) {}
};

// Metric is mathematically undefined on the given inputs
// (e.g. single-class ground truth for AUC).
class MetricError : public std::runtime_error {
public:
  explicit MetricError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mist
