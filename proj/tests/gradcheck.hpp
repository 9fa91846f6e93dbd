#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tg/rng.hpp"
#include "tg/tensor.hpp"

namespace tgtest {

struct FdReport {
    double max_abs_diff = 0.0;
    double max_rel_err = 0.0;
    bool ok = true;
    std::string worst;

    void merge(const FdReport& other) {
        if (other.max_rel_err > max_rel_err) {
            max_rel_err = other.max_rel_err;
            worst = other.worst;
        }
        max_abs_diff = std::max(max_abs_diff, other.max_abs_diff);
        ok = ok && other.ok;
    }
};

// Central-difference check of d(fn)/d(leaf) for every element of every leaf.
// fn must rebuild the graph from the leaves on each call and return a scalar.
// Pass condition per element: |analytic - fd| <= atol + rtol * max(|analytic|, |fd|).
inline FdReport fd_check(const std::function<tg::Tensor()>& fn, std::vector<tg::Tensor> leaves,
                         double rtol, double atol, const std::string& tag, double h = 1e-5) {
    FdReport rep;
    for (auto& l : leaves) l.zero_grad();
    fn().backward();
    std::vector<tg::Buffer> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves) analytic.push_back(l.grad());

    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& data = leaves[li].mutable_data();
        for (size_t i = 0; i < data.size(); ++i) {
            double save = data[i];
            double fplus, fminus;
            {
                tg::NoGradGuard ng;
                data[i] = save + h;
                fplus = fn().item();
                data[i] = save - h;
                fminus = fn().item();
            }
            data[i] = save;
            double fd = (fplus - fminus) / (2.0 * h);
            double a = analytic[li][i];
            double diff = std::abs(a - fd);
            double rel = diff / std::max({std::abs(a), std::abs(fd), 1e-4});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                std::ostringstream os;
                os << tag << " leaf " << li << " elem " << i << ": analytic=" << a << " fd=" << fd;
                rep.worst = os.str();
            }
            rep.max_abs_diff = std::max(rep.max_abs_diff, diff);
            if (diff > atol + rtol * std::max(std::abs(a), std::abs(fd))) rep.ok = false;
        }
    }
    return rep;
}

inline tg::Tensor rand_tensor(tg::Shape shape, tg::Rng& rng, double scale = 1.0,
                              bool requires_grad = true) {
    std::vector<double> v(static_cast<size_t>(tg::shape_numel(shape)));
    for (double& x : v) x = rng.normal() * scale;
    return tg::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Fixed random linear readout mapping a tensor to a scalar so every output
// element influences the loss.
inline std::function<tg::Tensor(const tg::Tensor&)> make_readout(const tg::Shape& shape,
                                                                 tg::Rng& rng) {
    tg::Tensor c = rand_tensor(shape, rng, 1.0, false);
    return [c](const tg::Tensor& t) { return tg::mean_all(tg::mul(t, c)); };
}

// Finite-difference sweep over every differentiable operation, one seed per
// call. Returns the merged worst-case report.
inline FdReport op_fd_suite(uint64_t seed, double rtol, double atol) {
    using namespace tg;
    Rng rng(seed);
    FdReport rep;
    auto run = [&](const char* tag, const std::function<Tensor()>& fn,
                   std::vector<Tensor> leaves) {
        rep.merge(fd_check(fn, std::move(leaves), rtol, atol, tag));
    };

    {
        Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
        auto ro = make_readout({3, 4}, rng);
        run("add", [&] { return ro(add(a, b)); }, {a, b});
        run("sub", [&] { return ro(sub(a, b)); }, {a, b});
        run("mul", [&] { return ro(mul(a, b)); }, {a, b});
        run("scale", [&] { return ro(scale(a, 1.7)); }, {a});
        run("add_scalar", [&] { return ro(add_scalar(a, 0.3)); }, {a});
    }
    {
        Tensor x = rand_tensor({2, 3, 4}, rng);
        Tensor b1 = rand_tensor({4}, rng);
        Tensor b2 = rand_tensor({3, 4}, rng);
        auto ro = make_readout({2, 3, 4}, rng);
        run("add_bias/vec", [&] { return ro(add_bias(x, b1)); }, {x, b1});
        run("add_bias/mat", [&] { return ro(add_bias(x, b2)); }, {x, b2});
    }
    {
        Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({4, 5}, rng);
        auto ro = make_readout({3, 5}, rng);
        run("matmul/2x2", [&] { return ro(matmul(a, b)); }, {a, b});
        Tensor bt = rand_tensor({5, 4}, rng);
        run("matmul_nt/2x2", [&] { return ro(matmul_nt(a, bt)); }, {a, bt});
    }
    {
        Tensor a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({4, 5}, rng);
        auto ro = make_readout({2, 3, 5}, rng);
        run("matmul/rows", [&] { return ro(matmul(a, b)); }, {a, b});
    }
    {
        Tensor a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({2, 4, 5}, rng);
        auto ro = make_readout({2, 3, 5}, rng);
        run("matmul/batched", [&] { return ro(matmul(a, b)); }, {a, b});
        Tensor bt = rand_tensor({2, 5, 4}, rng);
        run("matmul_nt/batched", [&] { return ro(matmul_nt(a, bt)); }, {a, bt});
    }
    {
        Tensor a = rand_tensor({2, 2, 3, 4}, rng), b = rand_tensor({2, 2, 4, 5}, rng);
        auto ro = make_readout({2, 2, 3, 5}, rng);
        run("matmul/rank4", [&] { return ro(matmul(a, b)); }, {a, b});
    }
    {
        Tensor x = rand_tensor({2, 3, 4}, rng);
        auto ro_t = make_readout({2, 4, 3}, rng);
        run("transpose_last2", [&] { return ro_t(transpose_last2(x)); }, {x});
        auto ro_p = make_readout({4, 2, 3}, rng);
        run("permute", [&] { return ro_p(permute(x, {2, 0, 1})); }, {x});
        auto ro_r = make_readout({4, 6}, rng);
        run("reshape", [&] { return ro_r(reshape(x, {4, 6})); }, {x});
    }
    {
        Tensor x = rand_tensor({2, 5, 3}, rng);
        auto ro = make_readout({2, 3, 3}, rng);
        run("slice", [&] { return ro(slice(x, 1, 1, 3)); }, {x});
    }
    {
        Tensor a = rand_tensor({2, 2, 3}, rng);
        Tensor b = rand_tensor({2, 1, 3}, rng);
        Tensor c = rand_tensor({2, 4, 3}, rng);
        auto ro = make_readout({2, 7, 3}, rng);
        run("concat", [&] { return ro(concat({a, b, c}, 1)); }, {a, b, c});
    }
    {
        Tensor x = rand_tensor({2, 3, 4}, rng);
        auto ro = make_readout({2, 3, 4}, rng);
        for (int axis : {0, 1, 2}) {
            std::string tag = "softmax/axis" + std::to_string(axis);
            run(tag.c_str(), [&, axis] { return ro(softmax(x, axis)); }, {x});
        }
        run("gelu", [&] { return ro(gelu(x)); }, {x});
        run("l2_normalize", [&] { return ro(l2_normalize(x)); }, {x});
    }
    {
        Tensor x = rand_tensor({2, 3, 4}, rng);
        Tensor gain = rand_tensor({4}, rng);
        Tensor bias = rand_tensor({4}, rng);
        auto ro = make_readout({2, 3, 4}, rng);
        run("layer_norm", [&] { return ro(layer_norm(x, gain, bias)); }, {x, gain, bias});
    }
    {
        Tensor table = rand_tensor({7, 4}, rng);
        std::vector<int32_t> ids{1, 3, 0, 6, 3};
        auto ro = make_readout({5, 4}, rng);
        run("embedding_lookup", [&] { return ro(embedding_lookup(table, ids, {5})); }, {table});
    }
    {
        Tensor x = rand_tensor({2, 3, 4}, rng);
        auto ro0 = make_readout({3, 4}, rng);
        run("mean_pool/axis0", [&] { return ro0(mean_pool(x, 0)); }, {x});
        auto ro1 = make_readout({2, 4}, rng);
        run("mean_pool/axis1", [&] { return ro1(mean_pool(x, 1)); }, {x});
        run("mean_all", [&] { return mean_all(x); }, {x});
    }
    {
        Tensor logits = rand_tensor({4, 5}, rng);
        std::vector<int32_t> targets{1, 4, -1, 2};
        run("cross_entropy", [&] { return cross_entropy(logits, targets, -1); }, {logits});
    }
    {
        Tensor logits = rand_tensor({2, 3, 5}, rng);
        std::vector<int32_t> targets{1, 4, 0, 2, 0, 0};
        run("sequence_cross_entropy",
            [&] { return sequence_cross_entropy(logits, targets, 0); }, {logits});
    }
    {
        Tensor a = rand_tensor({6}, rng), b = rand_tensor({6}, rng);
        run("cosine_similarity", [&] { return cosine_similarity(a, b); }, {a, b});
    }
    {
        std::vector<double> v(12);
        for (double& x : v) x = std::abs(rng.normal()) + 0.1;
        Tensor x = Tensor::from_data({3, 4}, std::move(v), true);
        auto ro = make_readout({3, 4}, rng);
        run("mass_normalize", [&] { return ro(mass_normalize(x, 1.0)); }, {x});
    }
    {
        Tensor x = rand_tensor({2, 3}, rng);
        Tensor w = rand_tensor({3, 4}, rng);
        Tensor b = rand_tensor({4}, rng);
        auto ro = make_readout({2, 4}, rng);
        run("linear", [&] { return ro(linear(x, w, b)); }, {x, w, b});
    }
    // stop_gradient is excluded: finite differences see through the stopped
    // branch (it is rebuilt from the perturbed leaf), so FD measures d(x*x)/dx
    // while the defined gradient is x. It gets an exact analytic test instead.
    return rep;
}

}  // namespace tgtest
