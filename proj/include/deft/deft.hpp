#pragma once

#include "deft/collectives.hpp"
#include "deft/config.hpp"
#include "deft/metrics.hpp"
#include "deft/models.hpp"
#include "deft/partitioner.hpp"
#include "deft/report.hpp"
#include "deft/sparsifiers.hpp"
#include "deft/tensor.hpp"
#include "deft/trainer.hpp"
