// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dmu/errors.hpp"
#include "dmu/numerics/matrix.hpp"
#include "dmu/numerics/random.hpp"
#include "dmu/numerics/tape.hpp"
#include "dmu/numerics/grad_check.hpp"
#include "dmu/models.hpp"
#include "dmu/losses.hpp"
#include "dmu/data.hpp"
#include "dmu/engine.hpp"
#include "dmu/eval.hpp"
#include "dmu/experiment.hpp"
#include "dmu/io/binary.hpp"
#include "dmu/io/files.hpp"
#include "dmu/io/config.hpp"
#include "dmu/io/report.hpp"
#include "dmu/io/pipeline.hpp"
