// Training loops: ERM pretraining and group-aware-prior finetuning, both
// driven by minibatch SGD with momentum and a learning-rate schedule, plus
// multi-seed execution. A run is fully determined by (config, seed): data
// shuffling and context sampling use independent streams derived from the
// seed, so the lambda = tau = rho = 0 finetune reproduces plain ERM
// trajectories bit for bit.
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "gap/context.hpp"
#include "gap/datagen.hpp"
#include "gap/evalreport.hpp"
#include "gap/mlp.hpp"
#include "gap/prior.hpp"
#include "gap/rng.hpp"

namespace gap {

enum class Schedule { cosine, linear, constant };
enum class Mode { all_layers, last_layer };

struct TrainConfig {
    int epochs = 100;
    double initial_lr = 0.05;
    Schedule schedule = Schedule::cosine;
    double alpha_min = 0.01;  // cosine floor multiplier
    double momentum = 0.9;
    std::size_t batch_size = 128;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    Mode mode = Mode::all_layers;

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (!(initial_lr > 0.0)) throw std::invalid_argument("TrainConfig: initial_lr must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
        if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (!(weight_decay >= 0.0))
            throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
        if (!(alpha_min >= 0.0 && alpha_min <= 1.0))
            throw std::invalid_argument("TrainConfig: alpha_min must be in [0, 1]");
    }
};

inline double lr_at(Schedule schedule, double initial_lr, double alpha_min, long step,
                    long total_steps) {
    if (step < 0 || step > total_steps)
        throw std::invalid_argument("lr_at: step out of range");
    switch (schedule) {
        case Schedule::cosine: {
            const double t = static_cast<double>(step) / static_cast<double>(total_steps);
            return initial_lr * (alpha_min + (1.0 - alpha_min) * (1.0 + std::cos(M_PI * t)) / 2.0);
        }
        case Schedule::linear:
            return initial_lr *
                   (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
        case Schedule::constant:
            return initial_lr;
    }
    return initial_lr;
}

struct TrainingDiverged : std::runtime_error {
    explicit TrainingDiverged(int epoch_index)
        : std::runtime_error("training diverged (non-finite loss) at epoch " +
                             std::to_string(epoch_index)),
          epoch(epoch_index) {}
    int epoch;
};

struct EpochStats {
    int epoch = 0;
    double data_fit = 0.0;
    double prior_l2 = 0.0;
    double robustness = 0.0;
    double total = 0.0;
    double lr = 0.0;  // learning rate at the first step of the epoch
    std::map<int, double> val_group_acc;
    double val_wga = std::numeric_limits<double>::quiet_NaN();
};

struct RunRecord {
    std::string stage;  // "erm" or "gap"
    std::uint64_t seed = 0;
    Mode mode = Mode::all_layers;
    std::vector<EpochStats> epochs;
    std::map<int, double> context_group_prob;  // gap stage only, for auditability
    std::string checkpoint_path;
};

struct TrainResult {
    ParamVector params;
    RunRecord record;
};

namespace detail {

constexpr std::uint64_t kShuffleStream = 0x51u;
constexpr std::uint64_t kContextStream = 0xC7u;

/// v <- m*v + g; theta <- theta - lr*v, on trainable coordinates only.
inline void sgd_step(ParamVector& params, std::vector<double>& velocity,
                     std::span<const double> grad, double lr, double momentum) {
    for (std::size_t i = 0; i < params.dim(); ++i) {
        if (!params.trainable[i]) continue;
        velocity[i] = momentum * velocity[i] + grad[i];
        params.theta[i] -= lr * velocity[i];
    }
}

inline std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t>& order,
                                                           Rng& rng, std::size_t batch_size) {
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t pos = 0; pos < order.size(); pos += batch_size) {
        const std::size_t end = std::min(pos + batch_size, order.size());
        batches.emplace_back(order.begin() + pos, order.begin() + end);
    }
    return batches;
}

inline bool is_nonfinite_error(const std::exception& e) {
    return std::string(e.what()).find("non-finite") != std::string::npos;
}

inline void attach_val_metrics(EpochStats& stats, const ParamVector& params, const MlpSpec& spec,
                               const GroupedDataset* eval_set) {
    if (eval_set == nullptr || eval_set->empty()) return;
    stats.val_group_acc = per_group_accuracy(params, spec, *eval_set);
    double worst = 1.0;
    for (const auto& [g, a] : stats.val_group_acc) worst = std::min(worst, a);
    stats.val_wga = worst;
}

}  // namespace detail

/// Step 1: plain ERM (group labels unused). Minimizes batch-mean
/// cross-entropy plus (weight_decay/2)||theta||^2. Starts from `initial`
/// when given, otherwise from init_mlp(spec, cfg.seed).
inline TrainResult train_erm(const MlpSpec& spec, const GroupedDataset& train,
                             const TrainConfig& cfg, const ParamVector* initial = nullptr,
                             const GroupedDataset* eval_set = nullptr) {
    cfg.validate();
    if (train.empty()) throw std::invalid_argument("train_erm: empty training set");

    ParamVector params = initial != nullptr ? *initial : init_mlp(spec, cfg.seed);
    if (cfg.mode == Mode::last_layer) params = freeze_all_but_last(std::move(params));

    const ScalarFn loss = l2_regularized_ce_fn(spec, cfg.weight_decay);
    Rng shuffle_rng = Rng::stream(cfg.seed, detail::kShuffleStream);
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const long steps_per_epoch =
        static_cast<long>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
    const long total_steps = steps_per_epoch * cfg.epochs;

    RunRecord record;
    record.stage = "erm";
    record.seed = cfg.seed;
    record.mode = cfg.mode;

    std::vector<double> velocity(params.dim(), 0.0);
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = lr_at(cfg.schedule, cfg.initial_lr, cfg.alpha_min, step, total_steps);
        double loss_sum = 0.0;
        const auto batches = detail::epoch_batches(order, shuffle_rng, cfg.batch_size);
        for (const auto& idx : batches) {
            const double lr = lr_at(cfg.schedule, cfg.initial_lr, cfg.alpha_min, step, total_steps);
            const Batch batch = to_batch(train, idx);
            ValueGrad vg;
            try {
                vg = value_and_grad(loss, params.theta, batch);
            } catch (const std::exception& e) {
                if (detail::is_nonfinite_error(e)) throw TrainingDiverged(epoch);
                throw;
            }
            if (!std::isfinite(vg.value)) throw TrainingDiverged(epoch);
            for (std::size_t i = 0; i < vg.grad.size(); ++i)
                if (!params.trainable[i]) vg.grad[i] = 0.0;
            detail::sgd_step(params, velocity, vg.grad, lr, cfg.momentum);
            loss_sum += vg.value;
            ++step;
        }
        stats.data_fit = loss_sum / static_cast<double>(batches.size());
        stats.total = stats.data_fit;
        detail::attach_val_metrics(stats, params, spec, eval_set);
        record.epochs.push_back(std::move(stats));
    }
    return {std::move(params), std::move(record)};
}

/// Steps 2-3: build the group-aware prior on the context split and minimize
/// the full objective, starting from the ERM parameters. Context batches
/// are resampled every optimizer step. Data-fit batches come from the
/// context set by default (DataFitSource::context) or from `train_set`.
inline TrainResult finetune_gap(const ParamVector& params_erm, const MlpSpec& spec,
                                const GroupedDataset& val_context, const GapConfig& gap_cfg,
                                const TrainConfig& cfg, const GroupedDataset* train_set = nullptr,
                                const GroupedDataset* eval_set = nullptr) {
    cfg.validate();
    gap_cfg.validate();
    if (val_context.empty()) throw std::invalid_argument("finetune_gap: empty context set");

    const GroupedDataset* data_fit_set = &val_context;
    if (gap_cfg.data_fit_source == DataFitSource::train) {
        if (train_set == nullptr || train_set->empty())
            throw std::invalid_argument("finetune_gap: data_fit_source=train needs a train set");
        data_fit_set = train_set;
    }

    ParamVector params = params_erm;
    if (cfg.mode == Mode::last_layer) params = freeze_all_but_last(std::move(params));
    params.prior_mean = gap_cfg.prior_mean_source == PriorMeanSource::erm_checkpoint
                            ? params_erm.theta
                            : std::vector<double>(params.dim(), 0.0);

    ContextWeights weights;
    if (gap_cfg.lambda > 0.0)
        weights = compute_weights(val_context.group_counts, gap_cfg.gamma,
                                  gap_cfg.context_scheme);

    GapConfig step_cfg = gap_cfg;
    if (cfg.weight_decay > 0.0)
        throw std::invalid_argument(
            "finetune_gap: weight decay is replaced by the tau||theta - mu||^2 term");

    Rng shuffle_rng = Rng::stream(cfg.seed, detail::kShuffleStream);
    Rng context_rng = Rng::stream(cfg.seed, detail::kContextStream);
    std::vector<std::size_t> order(data_fit_set->size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const long steps_per_epoch =
        static_cast<long>((data_fit_set->size() + cfg.batch_size - 1) / cfg.batch_size);
    const long total_steps = steps_per_epoch * cfg.epochs;

    RunRecord record;
    record.stage = "gap";
    record.seed = cfg.seed;
    record.mode = cfg.mode;
    for (const auto& [g, p] : weights.group_prob) record.context_group_prob[g] = p;

    std::vector<double> velocity(params.dim(), 0.0);
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = lr_at(cfg.schedule, cfg.initial_lr, cfg.alpha_min, step, total_steps);
        double fit_sum = 0.0, prior_sum = 0.0, robust_sum = 0.0;
        const auto batches = detail::epoch_batches(order, shuffle_rng, cfg.batch_size);
        for (const auto& idx : batches) {
            const double lr = lr_at(cfg.schedule, cfg.initial_lr, cfg.alpha_min, step, total_steps);
            const Batch df_batch = to_batch(*data_fit_set, idx);
            Batch ctx_batch;
            if (step_cfg.lambda > 0.0)
                ctx_batch = sample_context_batch(val_context, weights,
                                                 step_cfg.context_batch_size, context_rng);
            GapLossResult res;
            try {
                res = gap_loss(params, spec, df_batch, ctx_batch, step_cfg);
            } catch (const std::exception& e) {
                if (detail::is_nonfinite_error(e)) throw TrainingDiverged(epoch);
                throw;
            }
            detail::sgd_step(params, velocity, res.grad, lr, cfg.momentum);
            fit_sum += res.data_fit;
            prior_sum += res.prior_l2;
            robust_sum += res.robustness;
            ++step;
        }
        const double nb = static_cast<double>(batches.size());
        stats.data_fit = fit_sum / nb;
        stats.prior_l2 = prior_sum / nb;
        stats.robustness = robust_sum / nb;
        stats.total = stats.data_fit + stats.prior_l2 + stats.robustness;
        detail::attach_val_metrics(stats, params, spec, eval_set);
        record.epochs.push_back(std::move(stats));
    }
    return {std::move(params), std::move(record)};
}

template <typename T>
struct SeedOutcome {
    std::uint64_t seed = 0;
    std::optional<T> result;
    std::string error;

    bool ok() const { return result.has_value(); }
};

/// Runs `fn(seed)` for seeds base..base+n-1, optionally across threads.
/// Each invocation owns its RNG streams, so results are independent of the
/// execution order and of `jobs`. Individual failures are recorded and the
/// remaining seeds proceed.
template <typename Fn>
auto run_seeds(std::size_t n, std::uint64_t base_seed, int jobs, Fn&& fn)
    -> std::vector<SeedOutcome<std::invoke_result_t<Fn&, std::uint64_t>>> {
    using T = std::invoke_result_t<Fn&, std::uint64_t>;
    if (n == 0) throw std::invalid_argument("run_seeds: n must be >= 1");
    std::vector<SeedOutcome<T>> out(n);
    std::atomic<std::size_t> next{0};
    const auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            const std::uint64_t seed = base_seed + i;
            out[i].seed = seed;
            try {
                out[i].result = fn(seed);
            } catch (const std::exception& e) {
                out[i].error = e.what();
            }
        }
    };
    const std::size_t workers =
        std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return out;
}

// --------------------------------------------------------------------------
// JSON serialization of run records and configs.
// --------------------------------------------------------------------------

inline const char* to_string(Schedule s) {
    switch (s) {
        case Schedule::cosine: return "cosine";
        case Schedule::linear: return "linear";
        case Schedule::constant: return "constant";
    }
    return "?";
}

inline const char* to_string(Mode m) { return m == Mode::all_layers ? "all_layers" : "last_layer"; }

inline Schedule schedule_from_string(const std::string& s) {
    if (s == "cosine") return Schedule::cosine;
    if (s == "linear") return Schedule::linear;
    if (s == "constant") return Schedule::constant;
    throw std::invalid_argument("unknown schedule: " + s);
}

inline Mode mode_from_string(const std::string& s) {
    if (s == "all_layers") return Mode::all_layers;
    if (s == "last_layer") return Mode::last_layer;
    throw std::invalid_argument("unknown mode: " + s);
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"initial_lr", c.initial_lr},
            {"schedule", to_string(c.schedule)},
            {"alpha_min", c.alpha_min},
            {"momentum", c.momentum},
            {"batch_size", c.batch_size},
            {"weight_decay", c.weight_decay},
            {"seed", c.seed},
            {"mode", to_string(c.mode)}};
}

inline nlohmann::json to_json(const RunRecord& r) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : r.epochs) {
        nlohmann::json je = {{"epoch", e.epoch},        {"data_fit", e.data_fit},
                             {"prior_l2", e.prior_l2},  {"robustness", e.robustness},
                             {"total", e.total},        {"lr", e.lr}};
        if (!e.val_group_acc.empty()) {
            nlohmann::json acc;
            for (const auto& [g, a] : e.val_group_acc) acc[std::to_string(g)] = a;
            je["val_group_acc"] = acc;
            je["val_wga"] = e.val_wga;
        }
        epochs.push_back(std::move(je));
    }
    nlohmann::json j = {{"stage", r.stage},
                        {"seed", r.seed},
                        {"mode", to_string(r.mode)},
                        {"epochs", std::move(epochs)}};
    if (!r.context_group_prob.empty()) {
        nlohmann::json probs;
        for (const auto& [g, p] : r.context_group_prob) probs[std::to_string(g)] = p;
        j["context_group_prob"] = probs;
    }
    if (!r.checkpoint_path.empty()) j["checkpoint"] = r.checkpoint_path;
    return j;
}

}  // namespace gap
