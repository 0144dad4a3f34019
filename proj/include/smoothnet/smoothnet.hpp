#pragma once

#include "smoothnet/error.hpp"
#include "smoothnet/core.hpp"
#include "smoothnet/spatial_index.hpp"
#include "smoothnet/io.hpp"
#include "smoothnet/config.hpp"
#include "smoothnet/lrf.hpp"
#include "smoothnet/sdv.hpp"
#include "smoothnet/net.hpp"
#include "smoothnet/train.hpp"
#include "smoothnet/match.hpp"
#include "smoothnet/eval.hpp"
#include "smoothnet/pipeline.hpp"
