#pragma once

#include "hmil/batching.hpp"
#include "hmil/encoding.hpp"
#include "hmil/error.hpp"
#include "hmil/mmd.hpp"
#include "hmil/model.hpp"
#include "hmil/nn/adam.hpp"
#include "hmil/nn/ops.hpp"
#include "hmil/nn/tape.hpp"
#include "hmil/nn/tensor.hpp"
#include "hmil/rng.hpp"
#include "hmil/schema.hpp"
#include "hmil/synthetic.hpp"
#include "hmil/training.hpp"
#include "hmil/verification.hpp"
