#pragma once

#include "darl/common.hpp"
#include "darl/config.hpp"
#include "darl/dataset.hpp"
#include "darl/dataset_io.hpp"
#include "darl/eval.hpp"
#include "darl/harness.hpp"
#include "darl/lpft.hpp"
#include "darl/model.hpp"
#include "darl/ood_select.hpp"
#include "darl/runner.hpp"
