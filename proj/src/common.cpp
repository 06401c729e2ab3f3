#include "moppr/common.hpp"

namespace moppr {

const char* objective_name(ObjectiveId o) {
  switch (o) {
    case ObjectiveId::Relevance: return "relevance";
    case ObjectiveId::Exposure: return "exposure";
    case ObjectiveId::Click: return "click";
    case ObjectiveId::Purchase: return "purchase";
  }
  return "unknown";
}

ObjectiveId parse_objective(const std::string& name) {
  for (ObjectiveId o : kAllObjectives)
    if (name == objective_name(o)) return o;
  throw InvalidConfig("unknown objective '" + name + "'");
}

}  // namespace moppr
