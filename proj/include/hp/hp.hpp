#pragma once

#include "hp/checkpoint.hpp"
#include "hp/errors.hpp"
#include "hp/evaluation.hpp"
#include "hp/heads.hpp"
#include "hp/mining.hpp"
#include "hp/objective.hpp"
#include "hp/refpool.hpp"
#include "hp/rng.hpp"
#include "hp/shard.hpp"
#include "hp/synthetic.hpp"
#include "hp/tensor.hpp"
#include "hp/train.hpp"
