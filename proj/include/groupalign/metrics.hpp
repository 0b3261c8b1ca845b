#pragma once

#include <vector>

#include "groupalign/errors.hpp"

namespace groupalign {

// One scored group: binary relevance labels and model scores, same length,
// indexed by candidate position.
struct ScoredGroup {
    std::vector<int> labels;
    std::vector<double> scores;
};

struct MetricResult {
    double value = 0.0;
    int n_groups = 0;   // groups that entered the mean
    int n_skipped = 0;  // degenerate groups left out, never imputed
};

// Mean over groups of average precision at descending score, ties broken by
// ascending candidate index. Groups without a positive are skipped.
MetricResult map_metric(const std::vector<ScoredGroup>& groups);

// Mean over groups of (correctly ordered positive-negative pairs + 0.5 *
// tied pairs) / (pos * neg). Groups lacking a positive or a negative are
// skipped.
MetricResult gauc_metric(const std::vector<ScoredGroup>& groups);

}  // namespace groupalign
