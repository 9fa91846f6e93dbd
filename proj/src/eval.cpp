#include "tg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tg/errors.hpp"

namespace tg {

PairMetrics pair_metrics(const std::vector<char>& pred, const std::vector<char>& gold,
                         const std::vector<char>& annotated) {
    if (pred.size() != gold.size() || pred.size() != annotated.size())
        throw ShapeError("metric masks must share one caption length");
    int64_t inter = 0, pred_annot = 0, gold_n = 0, union_n = 0;
    for (size_t j = 0; j < pred.size(); ++j) {
        bool pa = pred[j] && annotated[j];
        inter += pred[j] && gold[j];
        pred_annot += pa;
        gold_n += static_cast<bool>(gold[j]);
        union_n += pa || gold[j];
    }
    PairMetrics m;
    m.iou = union_n == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(union_n);
    m.precision =
        pred_annot == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(pred_annot);
    m.recall = gold_n == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(gold_n);
    m.f1 = m.precision + m.recall == 0.0
               ? 0.0
               : 2.0 * m.precision * m.recall / (m.precision + m.recall);
    return m;
}

double token_iou(const std::vector<char>& pred, const std::vector<char>& gold,
                 const std::vector<char>& annotated) {
    return pair_metrics(pred, gold, annotated).iou;
}

std::vector<int32_t> hungarian_match(const std::vector<double>& scores, int64_t rows,
                                     int64_t cols) {
    if (rows < 0 || cols < 0 || scores.size() != static_cast<size_t>(rows * cols))
        throw ShapeError("score matrix size does not match its dimensions");
    std::vector<int32_t> match(static_cast<size_t>(rows), -1);
    if (rows == 0 || cols == 0) return match;

    // Solve as min-cost assignment on negated scores, with the smaller side
    // as rows so every row ends up matched (exactly min(rows, cols) pairs).
    bool flipped = rows > cols;
    int64_t n = flipped ? cols : rows;  // n <= m
    int64_t m = flipped ? rows : cols;
    auto cost = [&](int64_t i, int64_t j) {
        return flipped ? -scores[static_cast<size_t>(j * cols + i)]
                       : -scores[static_cast<size_t>(i * cols + j)];
    };

    const double inf = std::numeric_limits<double>::infinity();
    // 1-based potentials / matching arrays; p[j] = row matched to column j
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(m) + 1, 0.0);
    std::vector<int64_t> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
    for (int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        int64_t j0 = 0;
        std::vector<double> minv(static_cast<size_t>(m) + 1, inf);
        std::vector<char> used(static_cast<size_t>(m) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            int64_t i0 = p[static_cast<size_t>(j0)], j1 = 0;
            double delta = inf;
            for (int64_t j = 1; j <= m; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                double cur = cost(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] -
                             v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int64_t j = 0; j <= m; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            int64_t j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }

    for (int64_t j = 1; j <= m; ++j) {
        int64_t i = p[static_cast<size_t>(j)];
        if (i == 0) continue;
        if (flipped)
            match[static_cast<size_t>(j - 1)] = static_cast<int32_t>(i - 1);
        else
            match[static_cast<size_t>(i - 1)] = static_cast<int32_t>(j - 1);
    }
    return match;
}

SegmentationReport segmentation_metrics(
    const std::vector<std::vector<int32_t>>& group_per_token,
    const std::vector<std::vector<std::pair<int32_t, int32_t>>>& gold_spans, int64_t n_groups) {
    if (group_per_token.size() != gold_spans.size())
        throw ShapeError("segmentation inputs differ in example count");
    SegmentationReport report;
    double sum_iou = 0.0, sum_p = 0.0, sum_r = 0.0, sum_f1 = 0.0;

    for (size_t ex = 0; ex < group_per_token.size(); ++ex) {
        const auto& groups = group_per_token[ex];
        const auto& spans = gold_spans[ex];
        if (spans.empty()) {
            ++report.n_skipped;
            continue;
        }
        auto len = static_cast<int64_t>(groups.size());

        std::vector<char> annotated(groups.size(), 0);
        std::vector<std::vector<char>> gold_masks;
        for (const auto& [start, end] : spans) {
            if (start < 0 || end > len || start >= end)
                throw DataError("gold span outside the caption");
            std::vector<char> mask(groups.size(), 0);
            for (int32_t j = start; j < end; ++j) {
                mask[static_cast<size_t>(j)] = 1;
                annotated[static_cast<size_t>(j)] = 1;
            }
            gold_masks.push_back(std::move(mask));
        }

        // only groups that actually claimed a token compete for spans
        std::vector<std::vector<char>> pred_masks;
        for (int64_t g = 0; g < n_groups; ++g) {
            std::vector<char> mask(groups.size(), 0);
            bool any = false;
            for (size_t j = 0; j < groups.size(); ++j) {
                if (groups[j] == static_cast<int32_t>(g)) {
                    mask[j] = 1;
                    any = true;
                }
            }
            if (any) pred_masks.push_back(std::move(mask));
        }

        auto rows = static_cast<int64_t>(pred_masks.size());
        auto cols = static_cast<int64_t>(gold_masks.size());
        std::vector<double> scores(static_cast<size_t>(rows * cols));
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c)
                scores[static_cast<size_t>(r * cols + c)] =
                    token_iou(pred_masks[static_cast<size_t>(r)],
                              gold_masks[static_cast<size_t>(c)], annotated);

        std::vector<int32_t> match = hungarian_match(scores, rows, cols);
        double ex_iou = 0.0, ex_p = 0.0, ex_r = 0.0, ex_f1 = 0.0;
        int64_t pairs = 0;
        for (int64_t r = 0; r < rows; ++r) {
            int32_t c = match[static_cast<size_t>(r)];
            if (c < 0) continue;
            PairMetrics m = pair_metrics(pred_masks[static_cast<size_t>(r)],
                                         gold_masks[static_cast<size_t>(c)], annotated);
            ex_iou += m.iou;
            ex_p += m.precision;
            ex_r += m.recall;
            ex_f1 += m.f1;
            ++pairs;
        }
        if (pairs > 0) {
            sum_iou += ex_iou / static_cast<double>(pairs);
            sum_p += ex_p / static_cast<double>(pairs);
            sum_r += ex_r / static_cast<double>(pairs);
            sum_f1 += ex_f1 / static_cast<double>(pairs);
        }
        ++report.n_examples;
    }

    if (report.n_examples > 0) {
        auto n = static_cast<double>(report.n_examples);
        report.tiou = 100.0 * sum_iou / n;
        report.precision = 100.0 * sum_p / n;
        report.recall = 100.0 * sum_r / n;
        report.f1 = 100.0 * sum_f1 / n;
    }
    return report;
}

namespace {

// Deterministic fixed-size eval batches in corpus order.
template <typename Fn>
void for_each_batch(const std::vector<DatasetExample>& examples, int64_t batch_size, Fn&& fn) {
    auto n = static_cast<int64_t>(examples.size());
    for (int64_t start = 0; start < n; start += batch_size) {
        int64_t stop = std::min(n, start + batch_size);
        fn(start, stop);
    }
}

Buffer pool_text(Model& model, const TextBatch& batch) {
    auto [final_groups, grouping] = encode_text(batch, model.encoder, GroupMode::Eval, 0);
    Tensor pooled =
        project_and_pool(final_groups, model.projector.text_w, model.projector.text_b);
    return pooled.data();
}

Buffer pool_image(Model& model, const std::vector<const ImageGroups*>& groups) {
    Tensor pooled = project_and_pool(image_groups_tensor(groups), model.projector.image_w,
                                     model.projector.image_b);
    return pooled.data();
}

double cosine(const double* a, const double* b, int64_t n) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double denom = std::sqrt(na) * std::sqrt(nb);
    return denom < 1e-24 ? 0.0 : dot / denom;
}

}  // namespace

SegmentationReport segmentation_eval(Model& model, const std::vector<DatasetExample>& examples,
                                     const Vocab& vocab, int64_t batch_size) {
    NoGradGuard frozen;
    std::vector<std::vector<int32_t>> segmentation;
    std::vector<std::vector<std::pair<int32_t, int32_t>>> spans;
    for_each_batch(examples, batch_size, [&](int64_t start, int64_t stop) {
        std::vector<const CaptionWithSpans*> caps;
        for (int64_t i = start; i < stop; ++i)
            caps.push_back(&examples[static_cast<size_t>(i)].caption);
        TextBatch batch = make_text_batch(caps, vocab, model.encoder.cfg.max_tokens);
        auto [final_groups, grouping] =
            encode_text(batch, model.encoder, GroupMode::Eval, 0);
        auto seg = extract_segmentation(grouping, batch);
        for (size_t b = 0; b < seg.size(); ++b) {
            segmentation.push_back(std::move(seg[b]));
            spans.push_back(batch.gold_spans[b]);
        }
    });
    return segmentation_metrics(segmentation, spans, model.encoder.cfg.n_groups);
}

double scene_ranking_accuracy(Model& model, const std::vector<DatasetExample>& examples,
                              const Vocab& vocab, int64_t batch_size) {
    NoGradGuard frozen;
    int64_t proj = model.encoder.cfg.projection_dim;
    int64_t wins = 0, total = 0;
    for_each_batch(examples, batch_size, [&](int64_t start, int64_t stop) {
        std::vector<const CaptionWithSpans*> caps;
        std::vector<const ImageGroups*> pos, neg;
        for (int64_t i = start; i < stop; ++i) {
            const DatasetExample& ex = examples[static_cast<size_t>(i)];
            if (ex.negatives.empty()) continue;
            caps.push_back(&ex.caption);
            pos.push_back(&ex.image_groups);
            neg.push_back(&ex.negatives[0].groups);
        }
        if (caps.empty()) return;
        TextBatch batch = make_text_batch(caps, vocab, model.encoder.cfg.max_tokens);
        Buffer text = pool_text(model, batch);
        Buffer pos_pool = pool_image(model, pos);
        Buffer neg_pool = pool_image(model, neg);
        for (size_t b = 0; b < caps.size(); ++b) {
            const double* t = text.data() + b * static_cast<size_t>(proj);
            double sim_pos = cosine(t, pos_pool.data() + b * static_cast<size_t>(proj), proj);
            double sim_neg = cosine(t, neg_pool.data() + b * static_cast<size_t>(proj), proj);
            wins += sim_pos > sim_neg;  // ties are failures
            ++total;
        }
    });
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(wins) / static_cast<double>(total);
}

double foil_ranking_accuracy(Model& model, const std::vector<DatasetExample>& examples,
                             const Vocab& vocab, int64_t batch_size) {
    NoGradGuard frozen;
    int64_t proj = model.encoder.cfg.projection_dim;
    int64_t wins = 0, total = 0;
    for_each_batch(examples, batch_size, [&](int64_t start, int64_t stop) {
        std::vector<const CaptionWithSpans*> caps;
        std::vector<const ImageGroups*> images;
        std::vector<CaptionWithSpans> foils;  // keep alive until batched
        foils.reserve(static_cast<size_t>(stop - start));
        for (int64_t i = start; i < stop; ++i) {
            const DatasetExample& ex = examples[static_cast<size_t>(i)];
            CaptionWithSpans foil = ex.caption;
            foil.tokens = ex.foil_tokens;
            foil.is_foil = true;
            foils.push_back(std::move(foil));
            caps.push_back(&ex.caption);
            images.push_back(&ex.image_groups);
        }
        for (const auto& f : foils) caps.push_back(&f);
        TextBatch batch = make_text_batch(caps, vocab, model.encoder.cfg.max_tokens);
        Buffer text = pool_text(model, batch);
        Buffer img_pool = pool_image(model, images);
        size_t n = foils.size();
        for (size_t b = 0; b < n; ++b) {
            const double* img = img_pool.data() + b * static_cast<size_t>(proj);
            double sim_true = cosine(img, text.data() + b * static_cast<size_t>(proj), proj);
            double sim_foil =
                cosine(img, text.data() + (n + b) * static_cast<size_t>(proj), proj);
            wins += sim_true > sim_foil;  // ties are failures
            ++total;
        }
    });
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(wins) / static_cast<double>(total);
}

SegmentationReport random_baseline(const std::vector<DatasetExample>& examples,
                                   const Vocab& vocab, const EncoderConfig& cfg, int64_t d_img,
                                   uint64_t seed, int64_t batch_size) {
    Model fresh = init_model(cfg, d_img, seed);
    return segmentation_eval(fresh, examples, vocab, batch_size);
}

}  // namespace tg
