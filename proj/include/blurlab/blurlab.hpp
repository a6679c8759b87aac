#pragma once

#include "blurlab/config.hpp"
#include "blurlab/dataset.hpp"
#include "blurlab/distribution.hpp"
#include "blurlab/error.hpp"
#include "blurlab/harness.hpp"
#include "blurlab/image.hpp"
#include "blurlab/imaging.hpp"
#include "blurlab/metrics.hpp"
#include "blurlab/net.hpp"
#include "blurlab/parallel.hpp"
#include "blurlab/predict.hpp"
#include "blurlab/psf.hpp"
#include "blurlab/rng.hpp"
#include "blurlab/train.hpp"
