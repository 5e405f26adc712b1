#ifndef EXITWISE_EXITWISE_HPP
#define EXITWISE_EXITWISE_HPP

#include "exitwise/dataset.hpp"
#include "exitwise/exit_policy.hpp"
#include "exitwise/harness.hpp"
#include "exitwise/math.hpp"
#include "exitwise/model.hpp"
#include "exitwise/objective.hpp"

#endif  // EXITWISE_EXITWISE_HPP
