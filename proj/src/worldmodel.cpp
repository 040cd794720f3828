#include "newt/worldmodel.hpp"

namespace newt {

#define NEWT_INSTANTIATE(S)                                                                   \
  template struct WorldModel<S>;                                                              \
  template WorldModel<S> make_world_model<S>(const WorldModelConfig&, std::uint64_t);         \
  template ModelTargets<S> compute_targets<S>(const WorldModel<S>&, const SegmentBatch<S>&,   \
                                              Rng&);                                          \
  template ModelLossReport model_loss<S>(WorldModel<S>&, const SegmentBatch<S>&,              \
                                         const ModelTargets<S>&, const ModelLossWeights&);    \
  template ModelLossReport model_loss<S>(WorldModel<S>&, const SegmentBatch<S>&, Rng&);       \
  template PolicyLossReport<S> policy_loss<S>(WorldModel<S>&, const SegmentBatch<S>&, Rng&,   \
                                              const PolicyLossOptions&);                      \
  template PretrainLossReport pretrain_loss<S>(WorldModel<S>&, const SegmentBatch<S>&, Rng&,  \
                                               Vector<S>*);                                   \
  template double bc_loss<S>(WorldModel<S>&, const SegmentBatch<S>&);

NEWT_INSTANTIATE(float)
NEWT_INSTANTIATE(double)

#undef NEWT_INSTANTIATE

}  // namespace newt
