#include "newt/planner.hpp"

namespace newt {

template class LatentPlanningModel<float>;
template PlanResult plan<LatentPlanningModel<float>>(const LatentPlanningModel<float>&,
                                                     const PlanState*, const PlannerConfig&, Rng&,
                                                     const PlanOptions&);

}  // namespace newt
