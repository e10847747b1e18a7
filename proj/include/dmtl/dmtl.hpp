#pragma once

#include "dmtl/adapters.hpp"
#include "dmtl/augment.hpp"
#include "dmtl/cli.hpp"
#include "dmtl/corpus.hpp"
#include "dmtl/crf.hpp"
#include "dmtl/encoder.hpp"
#include "dmtl/eval.hpp"
#include "dmtl/heads.hpp"
#include "dmtl/losses.hpp"
#include "dmtl/metrics.hpp"
#include "dmtl/trainer.hpp"
