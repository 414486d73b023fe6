#pragma once

#include "corefed/errors.hpp"
#include "corefed/rng.hpp"
#include "corefed/variational.hpp"
#include "corefed/bnn.hpp"
#include "corefed/coreset.hpp"
#include "corefed/data.hpp"
#include "corefed/metrics.hpp"
#include "corefed/federated.hpp"
#include "corefed/baselines.hpp"
#include "corefed/theory.hpp"
#include "corefed/experiment.hpp"
