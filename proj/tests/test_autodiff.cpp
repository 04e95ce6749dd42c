#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "maskflow/checkpoint.hpp"
#include "maskflow/gradcheck.hpp"
#include "maskflow/optim.hpp"

using namespace maskflow;

using DTape = BasicTape<double>;
using DVar = BasicVar<double>;
using DTensor = BasicTensor<double>;
using DFn = std::function<DVar(const DVar&)>;

namespace {

DTensor drandn(Shape s, Rng& rng, double sd = 1.0) { return DTensor::randn(std::move(s), rng, sd); }

}  // namespace

TEST(Primitives, AddIsElementwise) {
  Tape tape;
  auto out = add(tape.constant(Tensor({2}, {1, 2})), tape.constant(Tensor({2}, {3, 4})));
  EXPECT_EQ(out.value(), Tensor({2}, {4, 6}));
}

TEST(Primitives, MatmulByIdentity) {
  Rng rng(1, 0);
  Tape tape;
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[static_cast<std::size_t>(i * 4)] = 1;
  const Tensor a = Tensor::randn({3, 5}, rng);
  auto out = matmul(tape.constant(eye), tape.constant(a));
  EXPECT_EQ(out.value(), a);
}

TEST(Primitives, SoftmaxOfZerosIsUniform) {
  Tape tape;
  auto out = softmax_last(tape.constant(Tensor({3}, 0.f)));
  for (float v : out.value().data()) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-7);
}

TEST(Primitives, ShapeMismatchNamesBothShapes) {
  Tape tape;
  try {
    add(tape.constant(Tensor({2, 3})), tape.constant(Tensor({4})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
  EXPECT_THROW(matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3}))), ShapeError);
}

TEST(Primitives, BroadcastAlignsTrailingDimensions) {
  Tape tape;
  auto out = add(tape.constant(Tensor({2, 3}, {0, 1, 2, 3, 4, 5})), tape.constant(Tensor({3}, {10, 20, 30})));
  EXPECT_EQ(out.value(), Tensor({2, 3}, {10, 21, 32, 13, 24, 35}));
  auto col = mul(tape.constant(Tensor({2, 3}, 1.f)), tape.constant(Tensor({2, 1}, {2, 3})));
  EXPECT_EQ(col.value(), Tensor({2, 3}, {2, 2, 2, 3, 3, 3}));
}

TEST(Backward, SumOfSquares) {
  Tape tape;
  auto x = tape.leaf(Tensor({2}, {1, 2}));
  tape.backward(sum(mul(x, x)));
  EXPECT_EQ(tape.grad(x), Tensor({2}, {2, 4}));
}

TEST(Backward, ConstantFunctionGivesZeroGrad) {
  Tape tape;
  auto x = tape.leaf(Tensor({3}, {1, 2, 3}));
  auto c = tape.leaf(Tensor({1}, {5}));
  tape.backward(sum(c));
  EXPECT_EQ(tape.grad(x), Tensor::zeros({3}));
}

TEST(Backward, RejectsNonScalarAndReuse) {
  Tape tape;
  auto x = tape.leaf(Tensor({2}, {1, 2}));
  EXPECT_THROW(tape.backward(mul(x, x)), ShapeError);
  auto loss = sum(x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), std::logic_error);
}

TEST(Backward, ParametersReceiveGradients) {
  ParamStore store;
  auto& w = store.add("w", Tensor({2}, {3, -1}));
  Tape tape;
  tape.backward(sum(square(tape.param(w))));
  EXPECT_EQ(w.grad, Tensor({2}, {6, -2}));
}

TEST(Backward, ThreeLayerPerceptronMatchesFiniteDifferences) {
  Rng rng(7, 1);
  BasicParamStore<double> store;
  store.add("w1", drandn({6, 8}, rng, 0.5));
  store.add("b1", drandn({8}, rng, 0.1));
  store.add("w2", drandn({8, 8}, rng, 0.5));
  store.add("b2", drandn({8}, rng, 0.1));
  store.add("w3", drandn({8, 1}, rng, 0.5));
  const DTensor input = drandn({4, 6}, rng);
  auto loss = [&](DTape& tape) {
    auto h = silu(matmul(tape.constant(input), tape.param(store.at("w1"))) + tape.param(store.at("b1")));
    h = tanh(matmul(h, tape.param(store.at("w2"))) + tape.param(store.at("b2")));
    return mean(square(matmul(h, tape.param(store.at("w3")))));
  };
  EXPECT_LT(grad_check_params<double>(loss, store, 1e-3), 1e-3);
}

TEST(GradCheck, QuadraticIsExact) {
  const DFn f = [](const DVar& x) { return sum(square(x)); };
  EXPECT_LT(grad_check<double>(f, DTensor({1}, {3.0}), 1e-3), 1e-6);
}

TEST(GradCheck, Sigmoid) {
  Rng rng(3, 2);
  const DFn f = [](const DVar& x) { return sum(sigmoid(x)); };
  EXPECT_LT(grad_check<double>(f, DTensor::uniform({8}, rng, -2, 2), 1e-3), 1e-4);
}

TEST(GradCheck, LayerNormThenSum) {
  Rng rng(3, 3);
  const DTensor w = drandn({4, 8}, rng);
  // A plain sum of a normalized row is identically zero; weight it so the check is informative.
  const DFn f = [&](const DVar& x) { return sum(mul(layer_norm(x), x.tape().constant(w))); };
  EXPECT_LT(grad_check<double>(f, drandn({4, 8}, rng), 1e-3), 1e-3);
}

TEST(GradCheck, RejectsNonScalar) {
  const DFn f = [](const DVar& x) { return square(x); };
  EXPECT_THROW(grad_check<double>(f, DTensor({2}, {1.0, 2.0}), 1e-3), ShapeError);
}

// Every primitive against central differences on 100 random small inputs.
TEST(GradCheck, EveryPrimitiveOnRandomInputs) {
  Rng rng(11, 4);
  for (const auto& [name, worst] : check_primitives(100, rng)) EXPECT_LT(worst, 1e-3) << name;
}

TEST(Properties, MatmulIsAssociative) {
  Rng rng(5, 5);
  for (int trial = 0; trial < 10; ++trial) {
    Tape tape;
    auto a = tape.constant(Tensor::randn({8, 8}, rng));
    auto b = tape.constant(Tensor::randn({8, 8}, rng));
    auto c = tape.constant(Tensor::randn({8, 8}, rng));
    const auto left = matmul(a, matmul(b, c)).value();
    const auto right = matmul(matmul(a, b), c).value();
    float scale_ref = 0;
    for (float v : right.data()) scale_ref = std::max(scale_ref, std::abs(v));
    EXPECT_LT(max_abs_diff(left, right) / scale_ref, 1e-4f);
  }
}

TEST(Properties, BackwardIsDeterministic) {
  auto run = [] {
    Rng rng(9, 9);
    Tape tape;
    auto x = tape.leaf(Tensor::randn({4, 16}, rng));
    auto w = tape.constant(Tensor::randn({16, 16}, rng));
    auto h = softmax_last(matmul(layer_norm(x), w));
    tape.backward(mean(square(h)));
    return tape.grad(x);
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (float g : {0.3f, -2.0f, 1e-3f}) {
    Tensor p({1}, 1.0f);
    const Tensor grad({1}, g);
    AdamState st;
    st.lr = 0.01;
    std::vector<Tensor*> ps{&p};
    std::vector<const Tensor*> gs{&grad};
    adam_step<float>(ps, gs, st);
    EXPECT_NEAR(p[0] - 1.0f, -0.01f * (g > 0 ? 1.0f : -1.0f), 1e-6);
    EXPECT_EQ(st.step, 1);
  }
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Tensor p({3}, {1, 2, 3});
  const Tensor g = Tensor::zeros({3});
  AdamState st;
  std::vector<Tensor*> ps{&p};
  std::vector<const Tensor*> gs{&g};
  adam_step<float>(ps, gs, st);
  adam_step<float>(ps, gs, st);
  EXPECT_EQ(p, Tensor({3}, {1, 2, 3}));
  EXPECT_EQ(st.step, 2);
}

TEST(Adam, TwoStepsMatchScalarReference) {
  // Scalar reference written independently of the tensor implementation.
  double p_ref = 0, m = 0, v = 0;
  const double g = 0.5, lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    p_ref -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
  }
  Tensor p({1}, 0.0f);
  const Tensor grad({1}, static_cast<float>(g));
  AdamState st;
  st.lr = lr;
  std::vector<Tensor*> ps{&p};
  std::vector<const Tensor*> gs{&grad};
  adam_step<float>(ps, gs, st);
  adam_step<float>(ps, gs, st);
  EXPECT_NEAR(p[0], p_ref, 1e-6);
  EXPECT_NEAR(p[0], -0.2, 1e-6);
}

TEST(Adam, RejectsShapeMismatch) {
  Tensor p({2});
  const Tensor g({3});
  AdamState st;
  std::vector<Tensor*> ps{&p};
  std::vector<const Tensor*> gs{&g};
  EXPECT_THROW(adam_step<float>(ps, gs, st), ShapeError);
}

TEST(Checkpoint, RoundTripsTensorsAndMetadata) {
  Rng rng(2, 2);
  Archive a;
  a.tensors["alpha"] = Tensor::randn({3, 4}, rng);
  a.tensors["beta.gamma"] = Tensor::randn({7}, rng);
  a.metadata["step"] = 12;
  const auto path = std::filesystem::temp_directory_path() / "maskflow_ckpt_test.bin";
  save_archive(path, a);
  const Archive b = load_archive(path);
  EXPECT_EQ(b.tensors.at("alpha"), a.tensors.at("alpha"));
  EXPECT_EQ(b.tensors.at("beta.gamma"), a.tensors.at("beta.gamma"));
  EXPECT_EQ(b.metadata.at("step").get<int>(), 12);
  const std::string bytes = encode_archive(a);
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), 8);
  const auto header = nlohmann::json::parse(bytes.substr(8, len));
  EXPECT_EQ(header.at("alpha").at("offset").get<int>(), 0);
  EXPECT_EQ(header.at("beta.gamma").at("offset").get<int>(), 48);
  EXPECT_EQ(bytes.size(), 8 + len + (12 + 7) * 4);
  std::filesystem::remove(path);
  EXPECT_THROW(load_archive(path), IoError);
}
