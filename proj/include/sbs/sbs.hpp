// Licensed under the Apache License, Version 2.0

#pragma once

#include "sbs/binary_io.hpp"
#include "sbs/cnn.hpp"
#include "sbs/config.hpp"
#include "sbs/encoders.hpp"
#include "sbs/error.hpp"
#include "sbs/fixture.hpp"
#include "sbs/matrix.hpp"
#include "sbs/matrix_io.hpp"
#include "sbs/mlp.hpp"
#include "sbs/ntk.hpp"
#include "sbs/repro.hpp"
#include "sbs/smoothing.hpp"
#include "sbs/trainer.hpp"
#include "sbs/weight_store.hpp"
