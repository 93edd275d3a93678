#pragma once

#include <stdexcept>
#include <string>

namespace dln {

// Failure of a numerical procedure (non-PSD input, factorization breakdown,
// non-finite field value, line-search stall).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input text (dataset lines, trace files). The message carries
// the file and line number when known.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An optimizer step produced non-finite weights. Carries the last finite
// loss observed before the blow-up.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, double last_loss)
      : std::runtime_error(what), last_loss_(last_loss) {}

  double last_loss() const { return last_loss_; }

 private:
  double last_loss_;
};

}  // namespace dln
