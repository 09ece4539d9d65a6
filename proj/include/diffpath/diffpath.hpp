#pragma once

#include "diffpath/auroc.hpp"
#include "diffpath/config.hpp"
#include "diffpath/denoiser.hpp"
#include "diffpath/error.hpp"
#include "diffpath/file_predictor.hpp"
#include "diffpath/gmm.hpp"
#include "diffpath/harness.hpp"
#include "diffpath/mixture.hpp"
#include "diffpath/npy.hpp"
#include "diffpath/predictor.hpp"
#include "diffpath/random.hpp"
#include "diffpath/schedule.hpp"
#include "diffpath/score.hpp"
#include "diffpath/ssim.hpp"
#include "diffpath/tensor.hpp"
#include "diffpath/tensor_io.hpp"
#include "diffpath/trajectory.hpp"
