#pragma once

#include "hypermixer/errors.hpp"
#include "hypermixer/tensor.hpp"
#include "hypermixer/ops.hpp"
#include "hypermixer/mixing.hpp"
#include "hypermixer/model.hpp"
#include "hypermixer/checkpoint.hpp"
#include "hypermixer/flops.hpp"
#include "hypermixer/text.hpp"
#include "hypermixer/trainer.hpp"
#include "hypermixer/synthetic.hpp"
#include "hypermixer/benchmark.hpp"
#include "hypermixer/gradcheck.hpp"
#include "hypermixer/run_config.hpp"
#include "hypermixer/text_run.hpp"
