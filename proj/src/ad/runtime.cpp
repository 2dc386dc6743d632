#include "gflow/ad/graph.hpp"

namespace gflow::ad {

Counters& thread_counters() {
  thread_local Counters counters;
  return counters;
}

template class Graph<double>;
template class ParamStore<double>;

}  // namespace gflow::ad
