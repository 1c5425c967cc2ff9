#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <type_traits>
#include <vector>

#include "t2u/config.hpp"
#include "t2u/data.hpp"
#include "t2u/losses.hpp"
#include "t2u/metrics.hpp"
#include "t2u/model.hpp"
#include "t2u/optim.hpp"

namespace t2u {

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_dsc = 0;
    double val_iou = 0;
    double lr = 0;
};

struct ImageResult {
    std::string id;
    double loss = 0;
    ConfusionCounts counts;
    double dsc = 0;
    double iou = 0;
};

/// Per-image metrics with both averaging conventions: macro (mean of
/// per-image scores) and micro (scores of the pooled confusion counts).
struct EvalResult {
    std::vector<ImageResult> images;
    double mean_loss = 0;
    double mean_dsc = 0;
    double mean_iou = 0;
    ConfusionCounts pooled;
    double micro_dsc = 0;
    double micro_iou = 0;
};

/// Summarizes per-image results into macro and micro aggregates.
inline EvalResult aggregate(std::vector<ImageResult> images) {
    if (images.empty()) throw DataError("evaluate: empty split");
    EvalResult r;
    for (const auto& im : images) {
        r.mean_loss += im.loss;
        r.mean_dsc += im.dsc;
        r.mean_iou += im.iou;
        r.pooled += im.counts;
    }
    const double n = static_cast<double>(images.size());
    r.mean_loss /= n;
    r.mean_dsc /= n;
    r.mean_iou /= n;
    r.micro_dsc = dsc(r.pooled);
    r.micro_iou = iou(r.pooled);
    r.images = std::move(images);
    return r;
}

/// Eval-mode pass over `samples`. Deterministic; the model's running stats
/// are not modified.
template <class T>
EvalResult evaluate(Trans2Unet<T>& model, const std::vector<SegmentationSample>& samples, const LossConfig& loss_cfg,
                    std::size_t batch_size = 8) {
    if (samples.empty()) throw DataError("evaluate: empty split");
    NoGradGuard no_grad;
    std::vector<ImageResult> results;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        const std::vector<SegmentationSample> batch(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                                    samples.begin() + static_cast<std::ptrdiff_t>(end));
        const Tensor<T> logits = model.forward(stack_images<T>(batch), Mode::eval);
        const std::size_t plane = logits.numel() / batch.size();
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const auto& s = batch[b];
            const Shape shape{1, 1, s.height(), s.width()};
            const Tensor<T> l(shape, std::vector<T>(logits.data().begin() + static_cast<std::ptrdiff_t>(b * plane),
                                                    logits.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * plane)));
            const Tensor<T> target(shape, std::vector<T>(s.mask.data().begin(), s.mask.data().end()));
            const Tensor<T> q = sigmoid(l);
            ImageResult r;
            r.id = s.id;
            r.loss = static_cast<double>(segmentation_loss(l, target, loss_cfg).item());
            r.counts = confusion_counts<T, T>(q.data(), target.data());
            r.dsc = dsc(r.counts);
            r.iou = iou(r.counts);
            results.push_back(std::move(r));
        }
    }
    return aggregate(std::move(results));
}

template <class T>
struct TrainState {
    Adam<T> optimizer;
    PlateauScheduler scheduler;
    std::size_t epoch = 0;
    std::vector<EpochRecord> log;
    double best_val_dsc = -1;
    std::size_t best_epoch = 0;

    TrainState(const Trans2Unet<T>& model, const TrainOptions& opt)
        : optimizer(model.registry().params, opt.adam), scheduler(opt.plateau, opt.adam.lr) {}
};

/// Called after each epoch with the new record and whether it set a new best
/// validation DSC.
template <class T>
using EpochCallback = std::function<void(const EpochRecord&, bool is_best, Trans2Unet<T>&, TrainState<T>&)>;

/// Mini-batch training with Adam and reduce-on-plateau on the validation
/// loss. Randomness comes from the named streams "shuffle" and "augment" of
/// `opt.seed` (dropout masks come from the model's own stream).
template <class T>
TrainState<T> train(Trans2Unet<T>& model, const std::vector<SegmentationSample>& train_set,
                    const std::vector<SegmentationSample>& val_set, const TrainOptions& opt,
                    const std::type_identity_t<EpochCallback<T>>& on_epoch = {}) {
    if (train_set.empty()) throw DataError("train: empty training split");
    if (val_set.empty()) throw DataError("train: empty validation split");
    if (opt.batch_size == 0) throw std::invalid_argument("train: batch size must be >= 1");
    TrainState<T> state(model, opt);
    Rng shuffle_rng = Rng::stream(opt.seed, "shuffle");
    Rng augment_rng = Rng::stream(opt.seed, "augment");
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        const double lr_used = state.optimizer.lr();
        double loss_sum = 0;
        for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
            const std::size_t end = std::min(order.size(), start + opt.batch_size);
            std::vector<SegmentationSample> batch;
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(opt.augment ? augment_flip(train_set[order[i]], augment_rng) : train_set[order[i]]);
            }
            state.optimizer.zero_grad();
            const Tensor<T> logits = model.forward(stack_images<T>(batch), Mode::train);
            const Tensor<T> loss = segmentation_loss(logits, stack_masks<T>(batch), opt.loss);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv)) {
                throw NumericError("non-finite training loss at epoch " + std::to_string(epoch + 1));
            }
            loss.backward();
            state.optimizer.step();
            loss_sum += lv * static_cast<double>(batch.size());
        }
        const EvalResult val = evaluate(model, val_set, opt.loss);
        EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(train_set.size()), val.mean_loss, val.mean_dsc,
                        val.mean_iou, lr_used};
        state.optimizer.set_lr(state.scheduler.step(val.mean_loss));
        const bool is_best = rec.val_dsc > state.best_val_dsc;
        if (is_best) {
            state.best_val_dsc = rec.val_dsc;
            state.best_epoch = rec.epoch;
        }
        state.epoch = rec.epoch;
        state.log.push_back(rec);
        if (on_epoch) on_epoch(rec, is_best, model, state);
    }
    return state;
}

}  // namespace t2u
