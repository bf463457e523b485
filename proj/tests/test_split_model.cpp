#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "comsplit/gradcheck.hpp"
#include "comsplit/split_model.hpp"
#include "support/oracles.hpp"

using namespace comsplit;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
    std::vector<double> v(detail::shape_numel(shape));
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

SplitModel zero_model(std::size_t m, std::size_t edge_layers, std::size_t server_layers) {
    SplitModel model;
    std::size_t d = 1;
    for (std::size_t l = 0; l < edge_layers; ++l) {
        LstmLayerParams p;
        p.w_ih = Tensor::zeros({4 * m, d}, true);
        p.w_hh = Tensor::zeros({4 * m, m}, true);
        p.bias = Tensor::zeros({4 * m}, true);
        model.edge.layers.push_back(p);
        d = m;
    }
    d = m;
    for (std::size_t l = 0; l < server_layers; ++l) {
        LstmLayerParams p;
        p.w_ih = Tensor::zeros({4 * m, d}, true);
        p.w_hh = Tensor::zeros({4 * m, m}, true);
        p.bias = Tensor::zeros({4 * m}, true);
        model.server.layers.push_back(p);
    }
    model.server.fc = LinearHead{Tensor::zeros({1, m}, true), Tensor::zeros({1}, true)};
    return model;
}

}  // namespace

TEST_CASE("edge_forward of a zero-parameter edge is zero") {
    auto model = zero_model(10, 1, 3);
    Rng rng(41);
    Tensor x = random_tensor({2, 30}, rng);
    Tensor z = edge_forward(x, model.edge);
    CHECK(z.values() == std::vector<double>(20, 0.0));
}

TEST_CASE("edge_forward emits exactly M symbols per sample") {
    SplitModel model = make_split_model(10, 1, 3, false, ChannelConfig::none(), 51);
    Rng rng(42);
    Tensor x = random_tensor({1, 30}, rng);
    Tensor z = edge_forward(x, model.edge);
    CHECK(z.shape() == Shape{1, 10});  // CR = 30/10 = 3
}

TEST_CASE("edge_forward is bitwise reproducible") {
    SplitModel model = make_split_model(8, 1, 2, false, ChannelConfig::none(), 52);
    Rng rng(43);
    Tensor x = random_tensor({3, 12}, rng);
    CHECK(edge_forward(x, model.edge).values() == edge_forward(x, model.edge).values());
}

TEST_CASE("server_forward of a zero-parameter server returns the fc bias") {
    auto model = zero_model(6, 1, 3);
    model.server.fc->b.at(0) = 0.37;
    Rng rng(44);
    Tensor z_hat = random_tensor({4, 6}, rng);
    Tensor y = server_forward(z_hat, model.server);
    CHECK(y.shape() == Shape{4, 1});
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(i) == 0.37);
}

TEST_CASE("split forward equals the monolithic oracle bitwise with kind=none") {
    SplitModel model = make_split_model(7, 1, 3, false, ChannelConfig::none(), 53);
    Rng rng(45);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> xs(30);
        for (double& v : xs) v = rng.uniform(-1.0, 1.0);
        Tensor x = Tensor::from({1, 30}, xs);
        Rng ch(1);
        SplitForward f = split_forward(model, x, ch);
        CHECK(f.y_hat.item() == oracle::monolithic_forward(xs, model));
    }
}

TEST_CASE("server_forward rejects wrong representation width") {
    SplitModel model = make_split_model(6, 1, 2, false, ChannelConfig::none(), 54);
    CHECK_THROWS_AS(server_forward(Tensor::zeros({1, 5}), model.server), ContractError);
}

TEST_CASE("ee_forward analytic value and isolation from the server") {
    SplitModel model = make_split_model(5, 1, 2, true, ChannelConfig::none(), 55);
    model.ee_head->w.values().assign(5, 0.0);
    model.ee_head->b.at(0) = 0.1;
    Rng rng(46);
    Tensor x = random_tensor({2, 10}, rng);
    Tensor z = edge_forward(x, model.edge);
    Tensor y_ee = ee_forward(z, model.ee_head);
    CHECK(y_ee.at(0) == 0.1);
    CHECK(y_ee.at(1) == 0.1);

    // no graph path from the early-exit output to server parameters
    zero_grads(model.parameters());
    backward(sum(y_ee));
    for (const Tensor& p : model.server.parameters()) {
        CHECK(p.grad() == std::vector<double>(p.numel(), 0.0));
    }

    SplitModel headless = make_split_model(5, 1, 2, false, ChannelConfig::none(), 56);
    CHECK_THROWS_AS(ee_forward(z, headless.ee_head), ContractError);
}

TEST_CASE("ee_forward gradient w.r.t. the head weights is z") {
    SplitModel model = make_split_model(4, 1, 2, true, ChannelConfig::none(), 57);
    Rng rng(47);
    Tensor x = random_tensor({1, 8}, rng);
    Tensor z = edge_forward(x, model.edge);
    zero_grads({model.ee_head->w, model.ee_head->b});
    backward(ee_forward(z, model.ee_head));
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(model.ee_head->w.grad()[i] == Catch::Approx(z.at(i)).margin(1e-15));
    }
    auto res = check_gradients([&] { return ee_forward(edge_forward(x, model.edge), model.ee_head); },
                               {model.ee_head->w, model.ee_head->b});
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("loss_mse values and loop oracle") {
    Tensor y = Tensor::from({2, 1}, {0.4, -0.2});
    CHECK(loss_mse(y, y).item() == 0.0);

    CHECK(loss_mse(Tensor::from({2, 1}, {0, 0}), Tensor::from({2, 1}, {1, -1})).item() == 1.0);

    Rng rng(48);
    std::vector<double> yv(64), pv(64);
    for (auto& v : yv) v = rng.uniform(-1.0, 1.0);
    for (auto& v : pv) v = rng.uniform(-1.0, 1.0);
    const double ours = loss_mse(Tensor::from({64, 1}, yv), Tensor::from({64, 1}, pv)).item();
    CHECK(ours == Catch::Approx(oracle::loop_mse(yv, pv)).epsilon(1e-12));

    CHECK_THROWS_AS(loss_mse(Tensor{}, Tensor{}), ContractError);
}

TEST_CASE("loss_ee boundaries and linearity in lambda") {
    Rng rng(49);
    Tensor y = random_tensor({4, 1}, rng);
    Tensor y_hat = random_tensor({4, 1}, rng, true);
    Tensor y_ee = random_tensor({4, 1}, rng, true);

    CHECK(loss_ee(y, y_hat, y_ee, 1.0).item() == loss_mse(y, y_hat).item());
    CHECK(loss_ee(y, y_hat, y_ee, 0.0).item() == loss_mse(y, y_ee).item());

    // lambda = 1: early-exit branch receives exactly zero gradient
    zero_grads({y_hat, y_ee});
    backward(loss_ee(y, y_hat, y_ee, 1.0));
    CHECK(y_ee.grad() == std::vector<double>(4, 0.0));
    bool server_nonzero = false;
    for (double g : y_hat.grad()) server_nonzero = server_nonzero || g != 0.0;
    CHECK(server_nonzero);

    // equal branch losses at lambda = 0.5 reproduce the common value
    Tensor same = random_tensor({4, 1}, rng);
    const double l = loss_mse(y, same).item();
    CHECK(loss_ee(y, same, same, 0.5).item() == Catch::Approx(l).epsilon(1e-15));

    // linear in lambda
    const double l0 = loss_ee(y, y_hat, y_ee, 0.0).item();
    const double l1 = loss_ee(y, y_hat, y_ee, 1.0).item();
    for (double lam : {0.25, 0.5, 0.75}) {
        CHECK(loss_ee(y, y_hat, y_ee, lam).item() ==
              Catch::Approx(lam * l1 + (1 - lam) * l0).epsilon(1e-12));
    }

    CHECK_THROWS_AS(loss_ee(y, y_hat, y_ee, 1.5), ContractError);
    CHECK_THROWS_AS(loss_ee(y, y_hat, y_ee, -0.1), ContractError);
}

TEST_CASE("het_forward with C=1 reduces to the single-device pipeline") {
    const ChannelConfig ch = ChannelConfig::erasure(0.3);
    HetSplitModel het = make_het_split_model(6, {1}, 2, ch, 61);
    SplitModel single;
    single.edge = het.edges[0];
    single.server = het.server;
    single.channel = ch;

    Rng rng(50);
    Tensor x = random_tensor({3, 10}, rng);
    Rng ch_a(21), ch_b(21);
    const auto het_out = het_forward({x}, het, ch_a);
    const SplitForward f = split_forward(single, x, ch_b);
    REQUIRE(het_out.size() == 1);
    CHECK(het_out[0].values() == f.y_hat.values());
}

TEST_CASE("het_forward symmetry: identical edges and inputs, kind=none") {
    HetSplitModel het = make_het_split_model(5, {1, 1}, 2, ChannelConfig::none(), 62);
    het.edges[1] = het.edges[0];  // shared parameters
    Rng rng(51);
    Tensor x = random_tensor({2, 8}, rng);
    Rng ch(22);
    const auto out = het_forward({x, x}, het, ch);
    CHECK(out[0].values() == out[1].values());
}

TEST_CASE("shared server parameter count is independent of C") {
    HetSplitModel one = make_het_split_model(10, {1}, 3, ChannelConfig::none(), 63);
    HetSplitModel two = make_het_split_model(10, {1, 2}, 3, ChannelConfig::none(), 63);
    CHECK(one.server.parameter_count() == two.server.parameter_count());
}

TEST_CASE("het_forward rejects wrong batch count and width mismatch") {
    HetSplitModel het = make_het_split_model(4, {1, 2}, 2, ChannelConfig::none(), 64);
    Rng rng(52);
    Tensor x = random_tensor({2, 6}, rng);
    Rng ch(23);
    CHECK_THROWS_AS(het_forward({x}, het, ch), ContractError);

    HetSplitModel bad = het;
    bad.edges[0] = make_het_split_model(5, {1}, 2, ChannelConfig::none(), 65).edges[0];
    CHECK_THROWS_AS(het_forward({x, x}, bad, ch), ContractError);
}

TEST_CASE("loss_het values and loop oracle") {
    Rng rng(53);
    Tensor y1 = random_tensor({3, 1}, rng);
    Tensor p1 = random_tensor({3, 1}, rng);
    CHECK(loss_het({y1}, {p1}).item() == loss_mse(y1, p1).item());

    // two devices with per-device MSEs 0.1 and 0.3 sum to 0.4
    Tensor zero2 = Tensor::zeros({2, 1});
    Tensor a = Tensor::from({2, 1}, {std::sqrt(0.1), std::sqrt(0.1)});
    Tensor b = Tensor::from({2, 1}, {std::sqrt(0.3), std::sqrt(0.3)});
    CHECK(loss_het({zero2, zero2}, {a, b}).item() == Catch::Approx(0.4).epsilon(1e-12));

    Tensor y2 = random_tensor({4, 1}, rng);
    Tensor p2 = random_tensor({4, 1}, rng);
    const double ours = loss_het({y1, y2}, {p1, p2}).item();
    const double expect = oracle::loop_mse(y1.values(), p1.values()) +
                          oracle::loop_mse(y2.values(), p2.values());
    CHECK(ours == Catch::Approx(expect).epsilon(1e-12));

    CHECK_THROWS_AS(loss_het({y1}, {p1, p2}), ContractError);
    CHECK_THROWS_AS(loss_het({}, {}), ContractError);
}

TEST_CASE("het server gradients decompose into per-device contributions") {
    HetSplitModel het = make_het_split_model(5, {1, 2}, 2, ChannelConfig::none(), 66);
    Rng rng(54);
    Tensor x1 = random_tensor({3, 8}, rng);
    Tensor x2 = random_tensor({3, 8}, rng);
    Tensor y1 = random_tensor({3, 1}, rng);
    Tensor y2 = random_tensor({3, 1}, rng);
    // channel draws pinned: fixed masks per device
    std::vector<double> mask1(15), mask2(15);
    Rng mask_rng(25);
    for (double& m : mask1) m = mask_rng.bernoulli(0.7) ? 1.0 : 0.0;
    for (double& m : mask2) m = mask_rng.bernoulli(0.7) ? 1.0 : 0.0;

    const auto server_params = het.server.parameters();

    auto device_loss = [&](std::size_t device) {
        const Tensor& x = device == 0 ? x1 : x2;
        const Tensor& y = device == 0 ? y1 : y2;
        const auto& mask = device == 0 ? mask1 : mask2;
        Tensor z = edge_forward(x, het.edges[device]);
        return loss_mse(y, server_forward(mul_mask(z, mask), het.server));
    };

    zero_grads(het.parameters());
    backward(add(device_loss(0), device_loss(1)));
    std::vector<std::vector<double>> joint;
    for (const Tensor& p : server_params) joint.push_back(p.grad());

    zero_grads(het.parameters());
    backward(device_loss(0));
    std::vector<std::vector<double>> dev0;
    for (const Tensor& p : server_params) dev0.push_back(p.grad());

    zero_grads(het.parameters());
    backward(device_loss(1));
    for (std::size_t i = 0; i < server_params.size(); ++i) {
        const auto& g1 = server_params[i].grad();
        for (std::size_t j = 0; j < g1.size(); ++j) {
            CHECK(joint[i][j] == Catch::Approx(dev0[i][j] + g1[j]).margin(1e-12));
        }
    }
}

TEST_CASE("early-exit predictions are invariant to the channel configuration") {
    SplitModel model = make_split_model(6, 1, 2, true, ChannelConfig::erasure(0.4), 67);
    Rng rng(55);
    Tensor x = random_tensor({2, 10}, rng);
    Rng ch_a(26), ch_b(27);
    SplitForward under_erasure = split_forward(model, x, ch_a);
    model.channel = ChannelConfig::awgn(0.0, -5.0, 3, 3);
    SplitForward under_awgn = split_forward(model, x, ch_b);
    CHECK(under_erasure.y_hat_ee->values() == under_awgn.y_hat_ee->values());
}

TEST_CASE("select_mode") {
    CHECK(select_mode(0.04, 0.00194) == InferenceMode::exit_locally);
    CHECK(select_mode(0.00085, 0.00194) == InferenceMode::forward_to_server);
    CHECK(select_mode(0.002, 0.002) == InferenceMode::forward_to_server);  // tie-break

    // fixed-threshold mode
    CHECK(select_mode(0.05, 0.001, 0.01) == InferenceMode::exit_locally);
    CHECK(select_mode(0.005, 0.001, 0.01) == InferenceMode::forward_to_server);

    CHECK_THROWS_AS(select_mode(std::nan(""), 0.1), ContractError);
}

TEST_CASE("split model checkpoints round-trip through the model-kind tag") {
    SplitModel model = make_split_model(5, 1, 3, true, ChannelConfig::erasure(0.2), 68);
    const auto path = std::filesystem::temp_directory_path() / "comsplit_split_ckpt.bin";
    save_checkpoint(path.string(), to_checkpoint(model));
    const Checkpoint ckpt = load_checkpoint(path.string());
    CHECK(ckpt.model_kind == "early_exit");
    SplitModel back = split_model_from_checkpoint(ckpt, model.channel);
    Rng rng(56);
    Tensor x = random_tensor({2, 10}, rng);
    CHECK(edge_forward(x, back.edge).values() == edge_forward(x, model.edge).values());
    CHECK(back.ee_head->w.values() == model.ee_head->w.values());

    HetSplitModel het = make_het_split_model(5, {1, 2}, 3, ChannelConfig::none(), 69);
    save_checkpoint(path.string(), to_checkpoint(het));
    const Checkpoint het_ckpt = load_checkpoint(path.string());
    CHECK(het_ckpt.model_kind == "heterogeneous");
    HetSplitModel het_back = het_model_from_checkpoint(het_ckpt, ChannelConfig::none());
    CHECK(het_back.edges.size() == 2);
    CHECK(het_back.edges[1].layers.size() == 2);
    std::filesystem::remove(path);
}
