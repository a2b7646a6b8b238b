#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace optnan {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed arguments: dimension mismatch, non-finite input, bad config.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// solve_linear refuses to return garbage for a numerically singular system.
class SingularSystem : public Error {
 public:
  using Error::Error;
};

// A backward pass was requested after a forward pass that produced
// non-finite values.
class NonFiniteForward : public Error {
 public:
  using Error::Error;
};

// Closed-form condition-number gradients are undefined on numerically
// singular matrices.
class SingularInput : public Error {
 public:
  using Error::Error;
};

// Extreme singular values are not simple; the two-norm gradient direction
// is not unique.
class DegenerateSpectrum : public Error {
 public:
  using Error::Error;
};

// Target construction asked to zero the smallest singular value of a
// matrix that is already singular.
class AlreadySingular : public Error {
 public:
  using Error::Error;
};

class ZeroMatrix : public Error {
 public:
  using Error::Error;
};

class DegenerateRhs : public Error {
 public:
  using Error::Error;
};

// Iterative solver ran out of budget. Carries the best iterate found so
// the caller can decide whether it is good enough.
class NotConverged : public Error {
 public:
  NotConverged(const std::string& what, std::vector<double> best_iterate,
               double residual)
      : Error(what), best(std::move(best_iterate)), residual(residual) {}

  std::vector<double> best;
  double residual;
};

}  // namespace optnan
