#pragma once

#include "toast/analyzer.hpp"
#include "toast/archive.hpp"
#include "toast/engine.hpp"
#include "toast/error.hpp"
#include "toast/linalg.hpp"
#include "toast/model.hpp"
#include "toast/pruner.hpp"
#include "toast/random.hpp"
#include "toast/tcs.hpp"
#include "toast/topk.hpp"
