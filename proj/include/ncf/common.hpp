#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace ncf {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dimension mismatch or malformed structure.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Data for which an analytic construction is undefined (e.g. q = 0).
class DegenerateDataError : public Error {
 public:
  using Error::Error;
};

/// The hypothesis of a check does not hold for the given input.
class InapplicableError : public Error {
 public:
  using Error::Error;
};

inline void require_structure(bool ok, const std::string& what) {
  if (!ok) throw StructuralError(what);
}

inline void require_domain(bool ok, const std::string& what) {
  if (!ok) throw DomainError(what);
}

}  // namespace ncf
