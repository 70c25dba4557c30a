#pragma once

#include "gcdro/core.hpp"
#include "gcdro/datagen.hpp"
#include "gcdro/graph.hpp"
#include "gcdro/weights.hpp"
#include "gcdro/risk.hpp"
#include "gcdro/models.hpp"
#include "gcdro/flow.hpp"
#include "gcdro/dro.hpp"
#include "gcdro/analysis.hpp"
