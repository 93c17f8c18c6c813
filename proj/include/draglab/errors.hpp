#pragma once

#include <stdexcept>
#include <string>

namespace draglab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Contract violations on indices (step index, block index).
class IndexError : public Error {
 public:
  using Error::Error;
};

class BoundsError : public Error {
 public:
  using Error::Error;
};

class CorpusError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class AdapterError : public Error {
 public:
  using Error::Error;
};

class CacheError : public Error {
 public:
  CacheError(const std::string& file, const std::string& what)
      : Error("cache artifact '" + file + "': " + what), file_(file) {}
  const std::string& file() const { return file_; }

 private:
  std::string file_;
};

class GuidanceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace draglab
