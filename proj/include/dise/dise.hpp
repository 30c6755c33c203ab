//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include "dise/autodiff.hpp"
#include "dise/checkpoint.hpp"
#include "dise/chem.hpp"
#include "dise/common.hpp"
#include "dise/dataset.hpp"
#include "dise/denoiser.hpp"
#include "dise/diffusion.hpp"
#include "dise/edge_tensor.hpp"
#include "dise/harness.hpp"
#include "dise/molgraph.hpp"
#include "dise/sampler.hpp"
#include "dise/spectra.hpp"
