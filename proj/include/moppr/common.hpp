#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace moppr {

using ItemId = std::int32_t;
using UserId = std::int32_t;
using QueryId = std::int32_t;
using CategoryId = std::int32_t;
using TermId = std::int32_t;

inline constexpr ItemId kPadItem = -1;

enum class ObjectiveId : int { Relevance = 0, Exposure = 1, Click = 2, Purchase = 3 };
inline constexpr int kNumObjectives = 4;
inline constexpr ObjectiveId kAllObjectives[kNumObjectives] = {ObjectiveId::Relevance, ObjectiveId::Exposure,
                                                                ObjectiveId::Click, ObjectiveId::Purchase};

const char* objective_name(ObjectiveId o);
/// Accepts the lower-case names ("relevance", "exposure", "click", "purchase").
ObjectiveId parse_objective(const std::string& name);

/// Base for every error raised by the library. Each subclass maps to one
/// failure family so callers (and the CLI) can report it precisely.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

class NotFound : public Error {
 public:
  using Error::Error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class DataIntegrity : public Error {
 public:
  using Error::Error;
};

class BatchSizeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace moppr
