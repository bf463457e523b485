#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>

#include "comsplit/gradcheck.hpp"
#include "comsplit/nn.hpp"
#include "support/oracles.hpp"

using namespace comsplit;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
    std::vector<double> v(detail::shape_numel(shape));
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

LstmLayerParams zero_layer(std::size_t d, std::size_t h) {
    LstmLayerParams p;
    p.w_ih = Tensor::zeros({4 * h, d}, true);
    p.w_hh = Tensor::zeros({4 * h, h}, true);
    p.bias = Tensor::zeros({4 * h}, true);
    return p;
}

}  // namespace

TEST_CASE("lstm_cell with all-zero parameters gives zero state") {
    auto p = zero_layer(2, 3);
    Tensor x = Tensor::from({1, 2}, {0.7, -0.3});
    auto [h, c] = lstm_cell(x, Tensor::zeros({1, 3}), Tensor::zeros({1, 3}), p);
    // i = f = o = 0.5, g = 0 => c = 0, h = 0
    CHECK(h.values() == std::vector<double>(3, 0.0));
    CHECK(c.values() == std::vector<double>(3, 0.0));
}

TEST_CASE("lstm_cell gate saturation keeps the cell state") {
    const std::size_t hs = 3;
    auto p = zero_layer(1, hs);
    // forget gate saturated to 1, input gate to 0
    for (std::size_t j = 0; j < hs; ++j) {
        p.bias.at(hs + j) = 60.0;   // f -> 1 exactly in double precision
        p.bias.at(j) = -60.0;       // i -> ~0, i*g below c_prev's ulp
    }
    Tensor c_prev = Tensor::from({1, hs}, {0.5, -0.25, 0.125});
    auto [h, c] = lstm_cell(Tensor::from({1, 1}, {0.9}), Tensor::zeros({1, hs}), c_prev, p);
    CHECK(c.values() == c_prev.values());
}

TEST_CASE("lstm_cell gradients match finite differences") {
    Rng rng(21);
    auto p = init_lstm_layer(2, 3, rng);
    Tensor x = random_tensor({2, 2}, rng);
    Tensor h0 = random_tensor({2, 3}, rng);
    Tensor c0 = random_tensor({2, 3}, rng);
    auto res = check_gradients(
        [&] {
            auto [h, c] = lstm_cell(x, h0, c0, p);
            return sum(h);
        },
        {p.w_ih, p.w_hh, p.bias});
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("lstm_cell shape mismatch") {
    auto p = zero_layer(2, 3);
    CHECK_THROWS_AS(
        lstm_cell(Tensor::zeros({1, 5}), Tensor::zeros({1, 3}), Tensor::zeros({1, 3}), p),
        ShapeError);
}

TEST_CASE("stack forward with T=1 equals one cell call") {
    Rng rng(22);
    auto p = init_lstm_layer(1, 4, rng);
    Tensor x = random_tensor({3, 1}, rng);
    auto trace = lstm_stack_forward({x}, {p});
    auto [h, c] = lstm_cell(x, Tensor::zeros({3, 4}), Tensor::zeros({3, 4}), p);
    CHECK(trace.final_hidden(0).values() == h.values());
}

TEST_CASE("two stacked layers match the hand-unrolled oracle bitwise") {
    Rng rng(23);
    std::vector<LstmLayerParams> layers{init_lstm_layer(1, 4, rng), init_lstm_layer(4, 4, rng)};
    const std::vector<double> seq_values{0.3, -0.8};
    std::vector<Tensor> seq;
    for (double v : seq_values) seq.push_back(Tensor::from({1, 1}, {v}));
    auto trace = lstm_stack_forward(seq, layers);

    std::vector<std::vector<double>> oracle_seq{{0.3}, {-0.8}};
    const auto finals = oracle::lstm_stack(oracle_seq, layers);
    CHECK(trace.final_hidden(0).values() == finals[0]);
    CHECK(trace.final_hidden(1).values() == finals[1]);
}

TEST_CASE("final hidden shape is H for every layer") {
    Rng rng(24);
    std::vector<LstmLayerParams> layers{init_lstm_layer(1, 5, rng), init_lstm_layer(5, 5, rng),
                                        init_lstm_layer(5, 5, rng)};
    std::vector<Tensor> seq;
    for (int t = 0; t < 4; ++t) seq.push_back(random_tensor({2, 1}, rng));
    auto trace = lstm_stack_forward(seq, layers);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        CHECK(trace.final_hidden(l).shape() == Shape{2, 5});
    }
}

TEST_CASE("empty sequence is rejected") {
    Rng rng(25);
    std::vector<LstmLayerParams> layers{init_lstm_layer(1, 2, rng)};
    CHECK_THROWS_AS(lstm_stack_forward({}, layers), ContractError);
}

TEST_CASE("stack output is invariant to sequence chunking") {
    Rng rng(26);
    std::vector<LstmLayerParams> layers{init_lstm_layer(1, 4, rng), init_lstm_layer(4, 4, rng)};
    std::vector<Tensor> seq;
    for (int t = 0; t < 6; ++t) seq.push_back(random_tensor({2, 1}, rng));

    auto whole = lstm_stack_forward(seq, layers);
    std::vector<Tensor> head(seq.begin(), seq.begin() + 2);
    std::vector<Tensor> tail(seq.begin() + 2, seq.end());
    auto part1 = lstm_stack_forward(head, layers);
    auto part2 = lstm_stack_forward(tail, layers, &part1.final_state);

    for (std::size_t l = 0; l < layers.size(); ++l) {
        CHECK(whole.final_hidden(l).values() == part2.final_hidden(l).values());
    }
}

TEST_CASE("fc analytic values and gradient") {
    LinearHead zero{Tensor::zeros({1, 3}, true), Tensor::from({1}, {0.3}, true)};
    CHECK(fc_forward(Tensor::zeros({1, 3}), zero).item() == 0.3);

    LinearHead ones{Tensor::from({1, 2}, {1, 1}, true), Tensor::from({1}, {0.0}, true)};
    CHECK(fc_forward(Tensor::from({1, 2}, {2, 3}), ones).item() == 5.0);

    Rng rng(27);
    Tensor h = random_tensor({1, 4}, rng);
    LinearHead head = init_linear_head(4, rng);
    backward(fc_forward(h, head));
    CHECK(head.w.grad() == h.values());  // dy/dW = h^T

    auto res = check_gradients([&] { return fc_forward(h, head); }, {head.w, head.b});
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("init_params is deterministic and range-bounded") {
    auto a = init_params(1, {10, 10}, true, 99);
    auto b = init_params(1, {10, 10}, true, 99);
    const auto pa = a.parameters();
    const auto pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].values() == pb[i].values());

    const double bound = 1.0 / std::sqrt(10.0);
    for (const Tensor& t : pa) {
        for (double v : t.values()) {
            CHECK(v >= -bound);
            CHECK(v <= bound);
        }
    }
}

TEST_CASE("init_params empirical mean is near zero") {
    // H = 10: accumulate 10^4+ draws across several seeds
    double total = 0.0;
    std::size_t count = 0;
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
        auto stack = init_params(10, {10}, false, seed);
        for (const Tensor& t : stack.parameters()) {
            for (double v : t.values()) {
                total += v;
                ++count;
            }
        }
    }
    REQUIRE(count >= 10000);
    CHECK(std::abs(total / static_cast<double>(count)) < 0.01);
}

TEST_CASE("init_params rejects nonpositive sizes") {
    CHECK_THROWS_AS(init_params(0, {4}, false, 1), ContractError);
    CHECK_THROWS_AS(init_params(1, {}, false, 1), ContractError);
    CHECK_THROWS_AS(init_params(1, {0}, false, 1), ContractError);
}

TEST_CASE("checkpoints round-trip bitwise") {
    Rng rng(28);
    auto stack = init_params(1, {6, 6, 6}, true, 4242);
    Checkpoint ckpt;
    ckpt.model_kind = "baseline";
    int idx = 0;
    for (const Tensor& t : stack.parameters()) {
        ckpt.tensors.emplace_back("t" + std::to_string(idx++), t);
    }
    const auto path = std::filesystem::temp_directory_path() / "comsplit_ckpt_test.bin";
    save_checkpoint(path.string(), ckpt);
    const Checkpoint loaded = load_checkpoint(path.string());
    REQUIRE(loaded.model_kind == "baseline");
    REQUIRE(loaded.tensors.size() == ckpt.tensors.size());
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
        CHECK(loaded.tensors[i].first == ckpt.tensors[i].first);
        CHECK(loaded.tensors[i].second.shape() == ckpt.tensors[i].second.shape());
        CHECK(loaded.tensors[i].second.values() == ckpt.tensors[i].second.values());
    }
    std::filesystem::remove(path);
}

TEST_CASE("full-stack gradient check: 3 layers, H=4, T=5 sequence") {
    Rng rng(29);
    auto stack = init_params(1, {4, 4, 4}, true, 777);
    std::vector<Tensor> seq;
    for (int t = 0; t < 5; ++t) seq.push_back(random_tensor({2, 1}, rng));
    Tensor y = random_tensor({2, 1}, rng);

    auto forward = [&] {
        auto trace = lstm_stack_forward(seq, stack.layers);
        Tensor y_hat = fc_forward(trace.final_hidden(2), *stack.fc);
        return mean(square(sub(y, y_hat)));
    };
    auto res = check_gradients(forward, stack.parameters());
    CHECK(res.max_rel_err < 1e-5);
}
