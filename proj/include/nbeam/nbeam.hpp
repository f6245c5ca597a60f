#pragma once

#include "nbeam/array.hpp"
#include "nbeam/beamloc.hpp"
#include "nbeam/config.hpp"
#include "nbeam/dataset.hpp"
#include "nbeam/dsp.hpp"
#include "nbeam/evaluate.hpp"
#include "nbeam/losses.hpp"
#include "nbeam/metrics.hpp"
#include "nbeam/model.hpp"
#include "nbeam/roomsim.hpp"
#include "nbeam/selfcheck.hpp"
#include "nbeam/train.hpp"
#include "nbeam/version.hpp"
#include "nbeam/wav.hpp"
