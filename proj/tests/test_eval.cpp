#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "tg/encoder.hpp"
#include "tg/errors.hpp"
#include "tg/eval.hpp"
#include "tg/objectives.hpp"
#include "tg/rng.hpp"
#include "tg/world.hpp"

using namespace tg;

namespace {

std::vector<char> mask_of(std::initializer_list<int> on, size_t len) {
    std::vector<char> m(len, 0);
    for (int i : on) m[static_cast<size_t>(i)] = 1;
    return m;
}

// Best assignment total by exhaustive search: inject the smaller side into
// the larger one and take the maximum score sum.
double brute_force_best(const std::vector<double>& scores, int64_t rows, int64_t cols) {
    bool flip = rows > cols;
    int64_t n = flip ? cols : rows;
    int64_t m = flip ? rows : cols;
    auto at = [&](int64_t i, int64_t j) {
        return flip ? scores[static_cast<size_t>(j * cols + i)]
                    : scores[static_cast<size_t>(i * cols + j)];
    };
    std::vector<char> used(static_cast<size_t>(m), 0);
    double best = -1e300;
    auto rec = [&](auto&& self, int64_t i, double acc) -> void {
        if (i == n) {
            best = std::max(best, acc);
            return;
        }
        for (int64_t j = 0; j < m; ++j) {
            if (used[static_cast<size_t>(j)]) continue;
            used[static_cast<size_t>(j)] = 1;
            self(self, i + 1, acc + at(i, j));
            used[static_cast<size_t>(j)] = 0;
        }
    };
    rec(rec, 0, 0.0);
    return best;
}

std::string fresh_dir(const std::string& name) {
    std::filesystem::path p = std::filesystem::temp_directory_path() / "tg_eval_tests" / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

bool same_report(const SegmentationReport& a, const SegmentationReport& b) {
    return a.tiou == b.tiou && a.precision == b.precision && a.recall == b.recall &&
           a.f1 == b.f1 && a.n_examples == b.n_examples && a.n_skipped == b.n_skipped;
}

}  // namespace

TEST_CASE("pair metrics: worked examples and degenerate denominators") {
    size_t len = 6;
    std::vector<char> all(len, 1);

    // exact match
    PairMetrics m = pair_metrics(mask_of({2, 3}, len), mask_of({2, 3}, len), all);
    CHECK(m.iou == 1.0);
    CHECK(m.precision == 1.0);
    CHECK(m.recall == 1.0);
    CHECK(m.f1 == 1.0);

    // partial overlap, everything annotated
    m = pair_metrics(mask_of({1, 2, 3}, len), mask_of({2, 3, 4}, len), all);
    CHECK(m.iou == 0.5);  // 2 shared / 4 in the union
    CHECK(m.precision == doctest::Approx(2.0 / 3.0));
    CHECK(m.recall == doctest::Approx(2.0 / 3.0));
    CHECK(m.f1 == doctest::Approx(2.0 / 3.0));

    // the stray predicted token is unannotated, so it is not punished
    std::vector<char> annot = mask_of({0, 2, 3, 4, 5}, len);
    m = pair_metrics(mask_of({1, 2, 3}, len), mask_of({2, 3}, len), annot);
    CHECK(m.iou == 1.0);
    CHECK(m.precision == 1.0);
    CHECK(m.recall == 1.0);

    // empty prediction: zero across the board
    m = pair_metrics(mask_of({}, len), mask_of({2, 3}, len), all);
    CHECK(m.iou == 0.0);
    CHECK(m.precision == 0.0);
    CHECK(m.recall == 0.0);
    CHECK(m.f1 == 0.0);

    // empty everything: every 0/0 resolves to 0
    m = pair_metrics(mask_of({}, len), mask_of({}, len), all);
    CHECK(m.iou == 0.0);
    CHECK(m.precision == 0.0);
    CHECK(m.recall == 0.0);
    CHECK(m.f1 == 0.0);

    CHECK(token_iou(mask_of({1, 2}, len), mask_of({2}, len), all) ==
          pair_metrics(mask_of({1, 2}, len), mask_of({2}, len), all).iou);
    CHECK_THROWS_AS(pair_metrics(mask_of({1}, 4), mask_of({1}, 6), all), ShapeError);
}

TEST_CASE("pair metrics agree with set arithmetic on every 8-token configuration") {
    constexpr int kLen = 8;
    std::vector<char> p(kLen), g(kLen), a(kLen);
    int64_t mismatches = 0;
    for (uint32_t pm = 0; pm < 256; ++pm) {
        for (uint32_t gm = 0; gm < 256; ++gm) {
            for (uint32_t am = 0; am < 256; ++am) {
                for (int j = 0; j < kLen; ++j) {
                    p[static_cast<size_t>(j)] = static_cast<char>((pm >> j) & 1u);
                    g[static_cast<size_t>(j)] = static_cast<char>((gm >> j) & 1u);
                    a[static_cast<size_t>(j)] = static_cast<char>((am >> j) & 1u);
                }
                PairMetrics m = pair_metrics(p, g, a);

                int inter = std::popcount(pm & gm);
                int pa = std::popcount(pm & am);
                int gn = std::popcount(gm);
                int un = std::popcount((pm & am) | gm);
                double iou = un == 0 ? 0.0 : static_cast<double>(inter) / un;
                double prec = pa == 0 ? 0.0 : static_cast<double>(inter) / pa;
                double rec = gn == 0 ? 0.0 : static_cast<double>(inter) / gn;
                double f1 = prec + rec == 0.0 ? 0.0 : 2.0 * prec * rec / (prec + rec);
                if (m.iou != iou || m.precision != prec || m.recall != rec || m.f1 != f1)
                    ++mismatches;
            }
        }
    }
    CHECK(mismatches == 0);
}

TEST_CASE("maximum assignment: identity, rectangles, and a brute-force oracle") {
    // identity scores pick the diagonal
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<size_t>(i * 4 + i)] = 1.0;
    CHECK(hungarian_match(eye, 4, 4) == std::vector<int32_t>{0, 1, 2, 3});

    // wide and tall rectangles match exactly min(rows, cols) pairs
    Rng rng(1234);
    for (auto [r, c] : {std::pair<int64_t, int64_t>{4, 2}, {2, 4}, {1, 5}, {5, 1}}) {
        std::vector<double> s(static_cast<size_t>(r * c));
        for (double& x : s) x = rng.normal();
        std::vector<int32_t> match = hungarian_match(s, r, c);
        REQUIRE(static_cast<int64_t>(match.size()) == r);
        int64_t matched = 0;
        std::vector<char> used(static_cast<size_t>(c), 0);
        for (int32_t col : match) {
            if (col < 0) continue;
            ++matched;
            REQUIRE(col < c);
            CHECK(!used[static_cast<size_t>(col)]);
            used[static_cast<size_t>(col)] = 1;
        }
        CHECK(matched == std::min(r, c));
    }

    // exhaustive comparison on random instances up to 6x6, negative scores included
    for (int trial = 0; trial < 300; ++trial) {
        int64_t r = 1 + static_cast<int64_t>(rng.below(6));
        int64_t c = 1 + static_cast<int64_t>(rng.below(6));
        std::vector<double> s(static_cast<size_t>(r * c));
        for (double& x : s) x = rng.normal();
        std::vector<int32_t> match = hungarian_match(s, r, c);
        double total = 0.0;
        int64_t matched = 0;
        std::vector<char> used(static_cast<size_t>(c), 0);
        for (int64_t i = 0; i < r; ++i) {
            int32_t col = match[static_cast<size_t>(i)];
            if (col < 0) continue;
            REQUIRE(col < c);
            CHECK(!used[static_cast<size_t>(col)]);
            used[static_cast<size_t>(col)] = 1;
            total += s[static_cast<size_t>(i * c + col)];
            ++matched;
        }
        CHECK(matched == std::min(r, c));
        CHECK(total == doctest::Approx(brute_force_best(s, r, c)).epsilon(1e-9));

        CHECK(hungarian_match(s, r, c) == match);  // defined by the input alone
    }
}

TEST_CASE("segmentation metrics: perfection, swallowing, and skipping") {
    // two spans, each its own group, filler tokens in a third group
    std::vector<int32_t> perfect{2, 0, 0, 0, 2, 1, 1, 1};
    std::vector<std::pair<int32_t, int32_t>> spans{{1, 4}, {5, 8}};
    SegmentationReport r = segmentation_metrics({perfect}, {spans}, 3);
    CHECK(r.tiou == 100.0);
    CHECK(r.precision == 100.0);
    CHECK(r.recall == 100.0);
    CHECK(r.f1 == 100.0);
    CHECK(r.n_examples == 1);
    CHECK(r.n_skipped == 0);

    // one group swallowing both 3-token spans: a single matched pair at IoU
    // 3/6, perfect recall, and the metrics mean over that one pair
    std::vector<int32_t> blob(8, 0);
    r = segmentation_metrics({blob}, {spans}, 4);
    CHECK(r.tiou == 50.0);
    CHECK(r.precision == 50.0);
    CHECK(r.recall == 100.0);
    CHECK(r.f1 == doctest::Approx(100.0 * 2.0 / 3.0).epsilon(1e-12));

    // corpus mean is a mean of example means, not a pooled token count
    r = segmentation_metrics({perfect, blob}, {spans, spans}, 4);
    CHECK(r.tiou == 75.0);
    CHECK(r.n_examples == 2);

    // span-free examples are skipped but reported
    r = segmentation_metrics({perfect, blob, {0, 1, 2}}, {spans, spans, {}}, 4);
    CHECK(r.n_examples == 2);
    CHECK(r.n_skipped == 1);
    CHECK(r.tiou == 75.0);

    // no token claimed by any valid group: the example scores zero everywhere
    std::vector<int32_t> stray(8, 9);
    r = segmentation_metrics({stray}, {spans}, 3);
    CHECK(r.tiou == 0.0);
    CHECK(r.f1 == 0.0);
    CHECK(r.n_examples == 1);

    // all skipped leaves the zero report rather than 0/0
    r = segmentation_metrics({perfect}, {{}}, 3);
    CHECK(r.n_examples == 0);
    CHECK(r.n_skipped == 1);
    CHECK(r.tiou == 0.0);

    CHECK_THROWS_AS(segmentation_metrics({perfect}, {{{5, 9}}}, 3), DataError);
    CHECK_THROWS_AS(segmentation_metrics({perfect}, {{{-1, 3}}}, 3), DataError);
    CHECK_THROWS_AS(segmentation_metrics({perfect}, {{{4, 4}}}, 3), DataError);
    CHECK_THROWS_AS(segmentation_metrics({perfect, blob}, {spans}, 3), ShapeError);
}

TEST_CASE("model evaluation is deterministic and ignores the batch partition") {
    std::string dir = fresh_dir("model_eval");
    WorldConfig wcfg;
    build_dataset(dir, 6, 4, 12, 321, wcfg);
    WorldConfig loaded_cfg;
    Vocab vocab = load_vocab(dir + "/vocab.json", &loaded_cfg);
    std::vector<DatasetExample> test = load_dataset(dir + "/test.jsonl", vocab, loaded_cfg);
    REQUIRE(test.size() == 12);

    EncoderConfig cfg;
    cfg.vocab_size = static_cast<int64_t>(vocab.tokens.size());
    cfg.d = 8;
    cfg.n_heads = 2;
    cfg.n_pre_layers = 1;
    cfg.n_post_layers = 1;
    cfg.n_groups = 4;
    cfg.max_tokens = 32;
    cfg.projection_dim = 16;
    Model model = init_model(cfg, wcfg.d_img, 2025);

    SegmentationReport a = segmentation_eval(model, test, vocab, 5);
    SegmentationReport b = segmentation_eval(model, test, vocab, 5);
    CHECK(same_report(a, b));
    CHECK(a.n_examples + a.n_skipped == 12);
    CHECK(a.n_examples == 12);  // every scene has at least one object span

    // batch-max padding cannot leak into real outputs, so the partition of
    // the corpus into batches is invisible in the report
    SegmentationReport c = segmentation_eval(model, test, vocab, 3);
    SegmentationReport d = segmentation_eval(model, test, vocab, 12);
    CHECK(same_report(a, c));
    CHECK(same_report(a, d));

    double scene5 = scene_ranking_accuracy(model, test, vocab, 5);
    double scene3 = scene_ranking_accuracy(model, test, vocab, 3);
    CHECK(scene5 == scene3);
    CHECK(scene5 >= 0.0);
    CHECK(scene5 <= 100.0);

    double foil5 = foil_ranking_accuracy(model, test, vocab, 5);
    double foil3 = foil_ranking_accuracy(model, test, vocab, 3);
    CHECK(foil5 == foil3);
    CHECK(foil5 >= 0.0);
    CHECK(foil5 <= 100.0);

    // the untrained reference is a pure function of its seed
    SegmentationReport r1 = random_baseline(test, vocab, cfg, wcfg.d_img, 7, 5);
    SegmentationReport r2 = random_baseline(test, vocab, cfg, wcfg.d_img, 7, 5);
    SegmentationReport r3 = random_baseline(test, vocab, cfg, wcfg.d_img, 8, 5);
    CHECK(same_report(r1, r2));
    CHECK(r1.n_examples == 12);
    CHECK((r1.tiou != r3.tiou || r1.f1 != r3.f1));  // different seed, different model
}
