#pragma once

#include "terrain_pn/analysis.hpp"
#include "terrain_pn/datagen.hpp"
#include "terrain_pn/export.hpp"
#include "terrain_pn/geometry.hpp"
#include "terrain_pn/model.hpp"
#include "terrain_pn/numcore.hpp"
#include "terrain_pn/parallel.hpp"
#include "terrain_pn/profiles.hpp"
#include "terrain_pn/rng.hpp"
#include "terrain_pn/train.hpp"
