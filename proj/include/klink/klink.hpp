#pragma once

#include "klink/alignment.hpp"
#include "klink/autograd.hpp"
#include "klink/checkpoint.hpp"
#include "klink/config.hpp"
#include "klink/dataset.hpp"
#include "klink/gradcheck.hpp"
#include "klink/io.hpp"
#include "klink/knowledge_branch.hpp"
#include "klink/layers.hpp"
#include "klink/metrics.hpp"
#include "klink/model.hpp"
#include "klink/optim.hpp"
#include "klink/random.hpp"
#include "klink/signal_branch.hpp"
#include "klink/tensor.hpp"
#include "klink/training.hpp"
