#pragma once

#include "vqct/errors.hpp"
#include "vqct/tensor.hpp"
#include "vqct/ops.hpp"
#include "vqct/graph.hpp"
#include "vqct/codebook.hpp"
#include "vqct/io.hpp"
#include "vqct/model.hpp"
#include "vqct/volume.hpp"
#include "vqct/phantom.hpp"
#include "vqct/evaluation.hpp"
#include "vqct/pipeline.hpp"
#include "vqct/training.hpp"
