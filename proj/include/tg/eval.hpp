#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tg/objectives.hpp"
#include "tg/world.hpp"

namespace tg {

struct PairMetrics {
    double iou = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Token-set metrics over boolean masks of equal length. Unannotated tokens
// are excluded from the predicted side: the IoU denominator is
// |(pred ∩ annotated) ∪ gold| and the precision denominator |pred ∩ annotated|.
// Every 0/0 case evaluates to 0.
PairMetrics pair_metrics(const std::vector<char>& pred, const std::vector<char>& gold,
                         const std::vector<char>& annotated);
double token_iou(const std::vector<char>& pred, const std::vector<char>& gold,
                 const std::vector<char>& annotated);

// Maximum-total-score one-to-one assignment via the O(n^3) augmenting-path
// (Jonker-Volgenant) algorithm on negated scores. scores is rows x cols
// row-major; returns the matched column per row (-1 = unmatched), with
// exactly min(rows, cols) rows matched.
std::vector<int32_t> hungarian_match(const std::vector<double>& scores, int64_t rows,
                                     int64_t cols);

struct SegmentationReport {
    double tiou = 0.0;  // all four scaled x100
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    int64_t n_examples = 0;  // examples that entered the averages
    int64_t n_skipped = 0;   // examples without gold spans
};

// Corpus segmentation quality: per example, Hungarian-match the NONEMPTY
// predicted groups against the gold spans on token IoU, average each metric
// over the matched pairs, then average over examples.
SegmentationReport segmentation_metrics(
    const std::vector<std::vector<int32_t>>& group_per_token,
    const std::vector<std::vector<std::pair<int32_t, int32_t>>>& gold_spans, int64_t n_groups);

// Model-in-the-loop evaluation (all eval mode, deterministic batching).
SegmentationReport segmentation_eval(Model& model, const std::vector<DatasetExample>& examples,
                                     const Vocab& vocab, int64_t batch_size);

// Fraction x100 of examples whose positive scene outranks the altered scene
// under cosine similarity of the pooled projections. Ties count as failures.
double scene_ranking_accuracy(Model& model, const std::vector<DatasetExample>& examples,
                              const Vocab& vocab, int64_t batch_size);

// Fraction x100 of examples where the true caption outranks its foil.
double foil_ranking_accuracy(Model& model, const std::vector<DatasetExample>& examples,
                             const Vocab& vocab, int64_t batch_size);

// Segmentation quality of a freshly initialized encoder (the untrained
// reference point the trained model must beat).
SegmentationReport random_baseline(const std::vector<DatasetExample>& examples,
                                   const Vocab& vocab, const EncoderConfig& cfg, int64_t d_img,
                                   uint64_t seed, int64_t batch_size);

}  // namespace tg
