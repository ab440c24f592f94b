// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include "dynpois/prob_kernel.hpp"
#include "dynpois/model.hpp"
#include "dynpois/conjugate_filter.hpp"
#include "dynpois/mcmc.hpp"
#include "dynpois/evaluation.hpp"
#include "dynpois/io.hpp"
#include "dynpois/cli.hpp"
