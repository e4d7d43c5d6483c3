#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ktir {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A knowledge-graph TSV row that does not have 3 or 4 tab-separated fields.
class MalformedLine : public Error {
 public:
  MalformedLine(std::size_t line_no, const std::string& detail)
      : Error("malformed line " + std::to_string(line_no) + ": " + detail),
        line_no_(line_no) {}
  std::size_t line_no() const { return line_no_; }

 private:
  std::size_t line_no_;
};

class UnknownRelation : public Error {
 public:
  using Error::Error;
};

class NotScalar : public Error {
 public:
  using Error::Error;
};

class NotSquare : public Error {
 public:
  using Error::Error;
};

class BatchTooSmall : public Error {
 public:
  using Error::Error;
};

class MissingGroundTruth : public Error {
 public:
  using Error::Error;
};

class MalformedManifest : public Error {
 public:
  using Error::Error;
};

class CheckpointMismatch : public Error {
 public:
  using Error::Error;
};

class DivergedLoss : public Error {
 public:
  using Error::Error;
};

}  // namespace ktir
