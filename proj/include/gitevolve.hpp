#pragma once

#include "gitevolve/core_types.hpp"
#include "gitevolve/encoder.hpp"
#include "gitevolve/error.hpp"
#include "gitevolve/grouping.hpp"
#include "gitevolve/ingestion.hpp"
#include "gitevolve/metrics.hpp"
#include "gitevolve/model.hpp"
#include "gitevolve/pipeline.hpp"
#include "gitevolve/repo_graph.hpp"
#include "gitevolve/simulator.hpp"
#include "gitevolve/testkit.hpp"
