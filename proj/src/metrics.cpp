#include "groupalign/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace groupalign {

namespace {

void check_group(const ScoredGroup& g) {
    if (g.labels.size() != g.scores.size())
        throw DimensionError("metric: labels and scores lengths differ");
    for (int y : g.labels)
        if (y != 0 && y != 1) throw ContractError("metric: labels must be 0 or 1");
    for (double s : g.scores)
        if (!std::isfinite(s)) throw NumericalError("metric: non-finite score");
}

}  // namespace

MetricResult map_metric(const std::vector<ScoredGroup>& groups) {
    MetricResult res;
    double acc = 0.0;
    for (const auto& g : groups) {
        check_group(g);
        int positives = std::accumulate(g.labels.begin(), g.labels.end(), 0);
        if (positives == 0) {
            ++res.n_skipped;
            continue;
        }
        std::vector<int> order(g.labels.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            if (g.scores[a] != g.scores[b]) return g.scores[a] > g.scores[b];
            return a < b;
        });
        double ap = 0.0;
        int hits = 0;
        for (std::size_t rank = 0; rank < order.size(); ++rank) {
            if (g.labels[order[rank]] == 1) {
                ++hits;
                ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
            }
        }
        acc += ap / positives;
        ++res.n_groups;
    }
    res.value = res.n_groups ? acc / res.n_groups : 0.0;
    return res;
}

MetricResult gauc_metric(const std::vector<ScoredGroup>& groups) {
    MetricResult res;
    double acc = 0.0;
    for (const auto& g : groups) {
        check_group(g);
        int positives = std::accumulate(g.labels.begin(), g.labels.end(), 0);
        int negatives = static_cast<int>(g.labels.size()) - positives;
        if (positives == 0 || negatives == 0) {
            ++res.n_skipped;
            continue;
        }
        double won = 0.0;
        for (std::size_t i = 0; i < g.labels.size(); ++i) {
            if (g.labels[i] != 1) continue;
            for (std::size_t j = 0; j < g.labels.size(); ++j) {
                if (g.labels[j] != 0) continue;
                if (g.scores[i] > g.scores[j])
                    won += 1.0;
                else if (g.scores[i] == g.scores[j])
                    won += 0.5;
            }
        }
        acc += won / (static_cast<double>(positives) * negatives);
        ++res.n_groups;
    }
    res.value = res.n_groups ? acc / res.n_groups : 0.0;
    return res;
}

}  // namespace groupalign
