#pragma once

#include "yesbound/error.hpp"
#include "yesbound/linalg.hpp"
#include "yesbound/rng.hpp"
#include "yesbound/hash.hpp"
#include "yesbound/gradcheck.hpp"
#include "yesbound/quant.hpp"
#include "yesbound/optim.hpp"
#include "yesbound/fcnn.hpp"
#include "yesbound/fcnn_yes.hpp"
#include "yesbound/bound_cloud.hpp"
#include "yesbound/lm/ops.hpp"
#include "yesbound/lm/model.hpp"
#include "yesbound/data.hpp"
#include "yesbound/synth.hpp"
#include "yesbound/yes_lm.hpp"
#include "yesbound/checkpoint.hpp"
#include "yesbound/metrics.hpp"
#include "yesbound/harness.hpp"
#include "yesbound/manifest.hpp"
#include "yesbound/gradcheck_suite.hpp"
