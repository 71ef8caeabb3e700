#pragma once

#include "openrft/common.hpp"
#include "openrft/data.hpp"
#include "openrft/distill.hpp"
#include "openrft/harness.hpp"
#include "openrft/optim.hpp"
#include "openrft/policy.hpp"
#include "openrft/ppo.hpp"
#include "openrft/reward.hpp"
#include "openrft/task_env.hpp"
