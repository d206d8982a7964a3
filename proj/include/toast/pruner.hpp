#pragma once

// Coupled structured pruning of the per-head attention width.
//
// Within a head, column j of Wq and column j of Wk are removed together (the
// Q.K^T inner product stays well defined), and column j of Wv is removed
// together with row j of Wproj. Importance of dimension j is the distance of
// its coupled weight vector from the geometric median of all of the head's
// coupled vectors; the dimensions nearest the median are the most
// replaceable and are dropped first.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"
#include "toast/error.hpp"
#include "toast/linalg.hpp"
#include "toast/model.hpp"
#include "toast/topk.hpp"

namespace toast {

enum class GroupKind { qk, vo };

struct CoupledGroup {
    GroupKind kind = GroupKind::qk;
    std::size_t head = 0;
    Matrix matrix;  // d_k x 2D; row j is the coupled vector of dimension j
};

// QK: row j = [Wq[:, j]; Wk[:, j]].  VO: row j = [Wv[:, j]; Wproj[j, :]].
inline CoupledGroup make_coupled_group(const HeadWeights& hw, GroupKind kind, std::size_t head) {
    const Matrix& first = kind == GroupKind::qk ? hw.wq : hw.wv;
    const std::size_t D = first.rows();
    const std::size_t k = first.cols();
    CoupledGroup g{kind, head, Matrix(k, 2 * D)};
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < D; ++i) g.matrix(j, i) = first(i, j);
        if (kind == GroupKind::qk) {
            for (std::size_t i = 0; i < D; ++i) g.matrix(j, D + i) = hw.wk(i, j);
        } else {
            for (std::size_t i = 0; i < D; ++i) g.matrix(j, D + i) = hw.wproj(j, i);
        }
    }
    return g;
}

struct GmOptions {
    double tol = 1e-6;
    std::size_t max_iter = 200;
};

// score[j] = || row_j - GM(rows) ||_2
inline Vector coupled_importance(const CoupledGroup& group, const GmOptions& gm = {}) {
    if (group.matrix.rows() == 0) throw InputError("coupled_importance: group has no dimensions");
    require_finite(group.matrix, "coupled_importance");
    const auto median = detail::geometric_median_f64(group.matrix, gm.tol, gm.max_iter);
    Vector scores(group.matrix.rows());
    for (std::size_t j = 0; j < group.matrix.rows(); ++j)
        scores[j] = static_cast<float>(detail::distance(group.matrix.row(j), median));
    return scores;
}

struct HeadPlan {
    std::vector<std::size_t> qk_keep;
    std::vector<std::size_t> vo_keep;

    friend bool operator==(const HeadPlan&, const HeadPlan&) = default;
};

struct LayerPlan {
    std::size_t dk_prime = 0;
    std::vector<HeadPlan> heads;

    friend bool operator==(const LayerPlan&, const LayerPlan&) = default;
};

struct PruningPlan {
    std::vector<LayerPlan> layers;

    friend bool operator==(const PruningPlan&, const PruningPlan&) = default;
};

// max(1, round((1 - ratio) * head_dim))
inline std::size_t pruned_head_dim(double ratio, std::size_t head_dim) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw InputError("ratio must be < 1 and >= 0");
    return kept_count(1.0 - ratio, head_dim);
}

// Head-wise uniform plan: every head of a layer keeps the same number of
// dimensions per kind. QK and VO keep sets are chosen independently.
inline PruningPlan build_plan(const ModelConfig& config, const ModelWeights& weights, double ratio, bool skip_first,
                              const GmOptions& gm = {}) {
    const std::size_t target = pruned_head_dim(ratio, config.head_dim);
    validate_weights(config, weights);
    if (config.is_pruned()) throw ShapeError("build_plan: model is already pruned");

    std::vector<std::size_t> all(config.head_dim);
    for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;

    PruningPlan plan;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        LayerPlan lp;
        const bool keep_all = (skip_first && l == 0) || target == config.head_dim;
        lp.dk_prime = keep_all ? config.head_dim : target;
        for (std::size_t h = 0; h < config.num_heads; ++h) {
            HeadPlan hp;
            if (keep_all) {
                hp.qk_keep = all;
                hp.vo_keep = all;
            } else {
                const auto& hw = weights.blocks[l].heads[h];
                const auto qk = coupled_importance(make_coupled_group(hw, GroupKind::qk, h), gm);
                const auto vo = coupled_importance(make_coupled_group(hw, GroupKind::vo, h), gm);
                hp.qk_keep = top_k_indices<float>(qk, target);
                hp.vo_keep = top_k_indices<float>(vo, target);
            }
            lp.heads.push_back(std::move(hp));
        }
        plan.layers.push_back(std::move(lp));
    }
    return plan;
}

namespace detail {

inline void check_keep(const std::vector<std::size_t>& keep, std::size_t dk_prime, std::size_t bound,
                       const std::string& what) {
    if (keep.size() != dk_prime) {
        throw ShapeError(what + ": keeps " + std::to_string(keep.size()) + " dimensions, dk_prime is " +
                         std::to_string(dk_prime));
    }
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (keep[i] >= bound) throw ShapeError(what + ": index " + std::to_string(keep[i]) + " out of range");
        if (i > 0 && keep[i] <= keep[i - 1]) throw ShapeError(what + ": indices must be strictly increasing");
    }
}

}  // namespace detail

inline void validate_plan(const ModelConfig& config, const PruningPlan& plan) {
    if (plan.layers.size() != config.num_layers) {
        throw ShapeError("plan has " + std::to_string(plan.layers.size()) + " layers, model has " +
                         std::to_string(config.num_layers));
    }
    for (std::size_t l = 0; l < plan.layers.size(); ++l) {
        const auto& lp = plan.layers[l];
        const std::string where = "plan layer " + std::to_string(l);
        if (lp.dk_prime < 1 || lp.dk_prime > config.live_head_dim(l)) throw ShapeError(where + ": dk_prime out of range");
        if (lp.heads.size() != config.num_heads) throw ShapeError(where + ": wrong head count");
        for (std::size_t h = 0; h < lp.heads.size(); ++h) {
            const std::string hw = where + " head " + std::to_string(h);
            detail::check_keep(lp.heads[h].qk_keep, lp.dk_prime, config.live_head_dim(l), hw + " qk_keep");
            detail::check_keep(lp.heads[h].vo_keep, lp.dk_prime, config.live_head_dim(l), hw + " vo_keep");
        }
    }
}

// Config of the model produced by apply_plan.
inline ModelConfig apply_plan(const ModelConfig& config, const PruningPlan& plan) {
    validate_plan(config, plan);
    ModelConfig out = config;
    for (std::size_t l = 0; l < plan.layers.size(); ++l) out.per_layer_head_dim[l] = plan.layers[l].dk_prime;
    return out;
}

// Slices every head down to the plan's kept dimensions. Block width D is unchanged.
inline ModelWeights apply_plan(const ModelConfig& config, const ModelWeights& weights, const PruningPlan& plan) {
    validate_weights(config, weights);
    validate_plan(config, plan);
    ModelWeights out = weights;
    for (std::size_t l = 0; l < plan.layers.size(); ++l) {
        for (std::size_t h = 0; h < config.num_heads; ++h) {
            const auto& src = weights.blocks[l].heads[h];
            auto& dst = out.blocks[l].heads[h];
            const auto& qk = plan.layers[l].heads[h].qk_keep;
            const auto& vo = plan.layers[l].heads[h].vo_keep;
            dst.wq = gather_columns(src.wq, qk);
            dst.wk = gather_columns(src.wk, qk);
            dst.bq = gather(src.bq, qk);
            dst.bk = gather(src.bk, qk);
            dst.wv = gather_columns(src.wv, vo);
            dst.bv = gather(src.bv, vo);
            dst.wproj = gather_rows(src.wproj, vo);
        }
    }
    return out;
}

inline nlohmann::json to_json(const PruningPlan& plan) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& lp : plan.layers) {
        nlohmann::json heads = nlohmann::json::array();
        for (const auto& hp : lp.heads) heads.push_back({{"qk_keep", hp.qk_keep}, {"vo_keep", hp.vo_keep}});
        layers.push_back({{"dk_prime", lp.dk_prime}, {"heads", std::move(heads)}});
    }
    return {{"layers", std::move(layers)}};
}

inline PruningPlan pruning_plan_from_json(const nlohmann::json& j) {
    PruningPlan plan;
    try {
        for (const auto& lj : j.at("layers")) {
            LayerPlan lp;
            lp.dk_prime = lj.at("dk_prime").get<std::size_t>();
            for (const auto& hj : lj.at("heads")) {
                lp.heads.push_back({hj.at("qk_keep").get<std::vector<std::size_t>>(),
                                    hj.at("vo_keep").get<std::vector<std::size_t>>()});
            }
            plan.layers.push_back(std::move(lp));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("pruning plan: ") + e.what());
    }
    return plan;
}

}  // namespace toast
