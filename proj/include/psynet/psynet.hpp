#pragma once

#include "psynet/config.hpp"
#include "psynet/dataio.hpp"
#include "psynet/dsp.hpp"
#include "psynet/errors.hpp"
#include "psynet/kernels.hpp"
#include "psynet/psnet.hpp"
#include "psynet/rng.hpp"
#include "psynet/synchrony.hpp"
#include "psynet/tensor.hpp"
#include "psynet/trainer.hpp"
