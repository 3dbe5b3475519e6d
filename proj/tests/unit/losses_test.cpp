#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ekd/losses.hpp"
#include "ekd/ops.hpp"
#include "ekd/verify/oracles.hpp"

using namespace ekd;
using ad::Tensord;
using nn::BlockOutputs;

namespace {

Tensord random_tensor(ad::Shape shape, std::mt19937_64& rng, bool grad = true, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensord::from(std::move(shape), std::move(v), grad);
}

BlockOutputs<double> random_outputs(std::size_t batch, std::size_t m, std::size_t d,
                                    std::size_t heads, std::mt19937_64& rng) {
  BlockOutputs<double> o;
  o.backbone_logits = random_tensor({batch, m}, rng, true, 2.0);
  o.backbone_feature = random_tensor({batch, d}, rng);
  for (std::size_t b = 1; b <= heads; ++b) {
    o.guided_blocks.push_back(b);
    o.guided_logits.push_back(random_tensor({batch, m}, rng, true, 2.0));
    o.guided_features.push_back(random_tensor({batch, d}, rng));
  }
  return o;
}

verify::Matrix to_matrix(const Tensord& t) {
  return {t.dim(0), t.dim(1), std::vector<double>(t.data().begin(), t.data().end())};
}

verify::StreamValues to_values(const BlockOutputs<double>& o) {
  verify::StreamValues v;
  v.backbone_logits = to_matrix(o.backbone_logits);
  v.backbone_feature = to_matrix(o.backbone_feature);
  for (const auto& t : o.guided_logits) v.guided_logits.push_back(to_matrix(t));
  for (const auto& t : o.guided_features) v.guided_features.push_back(to_matrix(t));
  return v;
}

}  // namespace

TEST(KlDistill, IdenticalLogitsGiveZero) {
  auto x = Tensord::from({2, 3}, {1, 2, 3, -1, 0, 1});
  EXPECT_NEAR(loss::kl_distill(x, x, 4.0).item(), 0.0, 1e-12);
}

TEST(KlDistill, SpotValueIsTwoTanhOne) {
  auto teacher = Tensord::from({1, 2}, {2, 0});
  auto student = Tensord::from({1, 2}, {0, 2});
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(loss::kl_distill(student, teacher, 1.0).item(), 2 * (e2 - 1) / (e2 + 1), 1e-9);
}

TEST(KlDistill, TemperatureFourMatchesOracle) {
  auto teacher = Tensord::from({1, 2}, {2, 0});
  auto student = Tensord::from({1, 2}, {0, 2});
  const double want = verify::oracle_kl(to_matrix(student), to_matrix(teacher), 4.0, true);
  EXPECT_NEAR(loss::kl_distill(student, teacher, 4.0).item(), want, 1e-6);
  const double no_t2 = loss::kl_distill(student, teacher, 4.0, false).item();
  EXPECT_NEAR(no_t2 * 16.0, want, 1e-9);
}

TEST(KlDistill, InvariantToPerRowShift) {
  std::mt19937_64 rng(1);
  auto s = random_tensor({4, 5}, rng, false);
  auto t = random_tensor({4, 5}, rng, false);
  std::vector<double> shifted(s.data().begin(), s.data().end());
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 5; ++c) shifted[r * 5 + c] += 3.0 * static_cast<double>(r) - 1.0;
  auto s2 = Tensord::from({4, 5}, shifted);
  EXPECT_NEAR(loss::kl_distill(s, t, 4.0).item(), loss::kl_distill(s2, t, 4.0).item(), 1e-9);
  EXPECT_NEAR(loss::kl_distill(t, s, 4.0).item(), loss::kl_distill(t, s2, 4.0).item(), 1e-9);
}

TEST(KlDistill, TeacherSideGetsNoGradient) {
  std::mt19937_64 rng(2);
  auto s = random_tensor({3, 4}, rng);
  auto t = random_tensor({3, 4}, rng);
  ad::backward(loss::kl_distill(s, t, 4.0));
  EXPECT_TRUE(s.has_grad());
  EXPECT_FALSE(t.has_grad());
}

TEST(KlDistill, RejectsBadArguments) {
  auto a = Tensord::zeros({2, 3});
  EXPECT_THROW(loss::kl_distill(a, Tensord::zeros({2, 4}), 4.0), ad::ShapeError);
  EXPECT_THROW(loss::kl_distill(a, a, 0.0), ad::ContractError);
  EXPECT_THROW(loss::kl_distill(a, a, -1.0), ad::ContractError);
}

TEST(L2Feature, Values) {
  auto a = Tensord::from({1, 2}, {1, 2});
  auto z = Tensord::from({1, 2}, {0, 0});
  EXPECT_DOUBLE_EQ(loss::l2_feature(a, z).item(), 5.0);
  EXPECT_DOUBLE_EQ(loss::l2_feature(a, a).item(), 0.0);
  EXPECT_THROW(loss::l2_feature(a, Tensord::zeros({1, 3})), ad::ShapeError);
}

TEST(L2Feature, TargetSideGetsNoGradient) {
  std::mt19937_64 rng(3);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  ad::backward(loss::l2_feature(a, b));
  EXPECT_TRUE(a.has_grad());
  EXPECT_FALSE(b.has_grad());
}

TEST(WithinStream, HeadEqualToBackboneGivesZero) {
  std::mt19937_64 rng(4);
  auto o = random_outputs(2, 3, 4, 1, rng);
  o.guided_logits[0] = o.backbone_logits;
  o.guided_features[0] = o.backbone_feature;
  auto w = loss::within_stream_loss(o, {});
  EXPECT_NEAR(w.l_d.item(), 0.0, 1e-12);
  EXPECT_NEAR(w.l_f.item(), 0.0, 1e-12);
}

TEST(WithinStream, SumsOneTermPerHead) {
  std::mt19937_64 rng(5);
  auto o = random_outputs(3, 4, 5, 2, rng);
  loss::DistillOptions opt;
  auto w = loss::within_stream_loss(o, opt);
  double kl = 0, l2 = 0;
  for (std::size_t b = 0; b < 2; ++b) {
    kl += loss::kl_distill(o.guided_logits[b], o.backbone_logits, 4.0).item();
    l2 += loss::l2_feature(o.guided_features[b], o.backbone_feature).item();
  }
  EXPECT_NEAR(w.l_d.item(), kl, 1e-9);
  EXPECT_NEAR(w.l_f.item(), l2, 1e-9);
}

TEST(WithinStream, MissingHeadsIsContractError) {
  std::mt19937_64 rng(6);
  auto o = random_outputs(2, 3, 4, 0, rng);
  EXPECT_THROW(loss::within_stream_loss(o, {}), ad::ContractError);
}

TEST(WithinStream, BackboneIsDetached) {
  std::mt19937_64 rng(7);
  auto o = random_outputs(2, 3, 4, 2, rng);
  auto w = loss::within_stream_loss(o, {});
  ad::backward(ad::add(w.l_d, w.l_f));
  EXPECT_FALSE(o.backbone_logits.has_grad());
  EXPECT_FALSE(o.backbone_feature.has_grad());
  EXPECT_TRUE(o.guided_logits[1].has_grad());
}

TEST(WithinStream, FullPairwiseMatchesOracle) {
  std::mt19937_64 rng(8);
  auto o = random_outputs(4, 3, 6, 3, rng);
  loss::DistillOptions opt;
  opt.within_mode = loss::WithinStreamMode::full_pairwise;
  auto w = loss::within_stream_loss(o, opt);
  const auto v = to_values(o);
  EXPECT_NEAR(w.l_d.item(), verify::oracle_l_d(v, 4.0, true, true), 1e-6);
  EXPECT_NEAR(w.l_f.item(), verify::oracle_l_f(v, true), 1e-6);
}

TEST(CrossStream, IdenticalStreamsGiveZero) {
  std::mt19937_64 rng(9);
  auto o = random_outputs(2, 3, 4, 2, rng);
  auto c = loss::cross_stream_loss(o, o, {});
  EXPECT_NEAR(c.l_g1.item(), 0.0, 1e-12);
  EXPECT_NEAR(c.l_g2.item(), 0.0, 1e-12);
  EXPECT_NEAR(c.l_g.item(), 0.0, 1e-12);
}

TEST(CrossStream, TermStructureAndOracle) {
  std::mt19937_64 rng(10);
  auto t = random_outputs(3, 3, 4, 2, rng);
  auto s = random_outputs(3, 3, 4, 2, rng);
  auto c = loss::cross_stream_loss(t, s, {});
  double g1 = loss::kl_distill(s.backbone_logits, t.backbone_logits, 4.0).item();
  double g2 = 0;
  for (std::size_t b = 0; b < 2; ++b) {
    g1 += loss::kl_distill(s.guided_logits[b], t.guided_logits[b], 4.0).item();
    g2 += loss::l2_feature(s.guided_features[b], t.guided_features[b]).item();
  }
  EXPECT_NEAR(c.l_g1.item(), g1, 1e-9);
  EXPECT_NEAR(c.l_g2.item(), g2, 1e-9);
  EXPECT_EQ(c.l_g.item(), c.l_g1.item() + c.l_g2.item());
  EXPECT_NEAR(c.l_g1.item(), verify::oracle_l_g1(to_values(t), to_values(s), 4.0, true), 1e-6);
  EXPECT_NEAR(c.l_g2.item(), verify::oracle_l_g2(to_values(t), to_values(s)), 1e-6);
}

TEST(CrossStream, PairCountMismatchIsContractError) {
  std::mt19937_64 rng(11);
  auto t = random_outputs(2, 3, 4, 2, rng);
  auto s = random_outputs(2, 3, 4, 1, rng);
  EXPECT_THROW(loss::cross_stream_loss(t, s, {}), ad::ContractError);
}

TEST(CrossStream, TeacherIsDetached) {
  std::mt19937_64 rng(12);
  auto t = random_outputs(2, 3, 4, 2, rng);
  auto s = random_outputs(2, 3, 4, 2, rng);
  auto c = loss::cross_stream_loss(t, s, {});
  ad::backward(c.l_g);
  EXPECT_FALSE(t.backbone_logits.has_grad());
  for (const auto& x : t.guided_logits) EXPECT_FALSE(x.has_grad());
  for (const auto& x : t.guided_features) EXPECT_FALSE(x.has_grad());
  EXPECT_TRUE(s.guided_features[0].has_grad());
}

TEST(Classification, UniformLogitsGiveCLogM) {
  BlockOutputs<double> o;
  o.backbone_logits = Tensord::zeros({4, 10});
  o.backbone_feature = Tensord::zeros({4, 2});
  for (std::size_t b = 1; b <= 2; ++b) {
    o.guided_blocks.push_back(b);
    o.guided_logits.push_back(Tensord::zeros({4, 10}));
    o.guided_features.push_back(Tensord::zeros({4, 2}));
  }
  std::vector<std::int32_t> labels{0, 3, 9, 5};
  EXPECT_NEAR(loss::classification_loss(o, labels).item(), 3 * std::log(10.0), 1e-12);
}

TEST(Classification, ConfidentCorrectLogitsNearZero) {
  BlockOutputs<double> o;
  o.backbone_logits = Tensord::from({2, 3}, {50, 0, 0, 0, 0, 50});
  o.backbone_feature = Tensord::zeros({2, 2});
  std::vector<std::int32_t> labels{0, 2};
  EXPECT_LT(loss::classification_loss(o, labels).item(), 1e-12);
}

TEST(Classification, MatchesOracleAndRejectsBadLabels) {
  std::mt19937_64 rng(13);
  auto o = random_outputs(5, 10, 4, 2, rng);
  std::vector<std::int32_t> labels{0, 9, 3, 3, 7};
  EXPECT_NEAR(loss::classification_loss(o, labels).item(), verify::oracle_l_l(to_values(o), labels),
              1e-6);
  std::vector<std::int32_t> bad{0, 10, 3, 3, 7};
  EXPECT_THROW(loss::classification_loss(o, bad), ad::ContractError);
}

TEST(TotalStreamLoss, TeacherHasNoCrossTerm) {
  std::mt19937_64 rng(14);
  auto o = random_outputs(2, 3, 4, 2, rng);
  auto within = loss::within_stream_loss(o, {});
  std::vector<std::int32_t> labels{1, 2};
  auto cls = loss::classification_loss(o, labels);
  auto r = loss::total_stream_loss<double>(within, std::nullopt, cls, loss::StreamRole::teacher);
  EXPECT_EQ(r.total.item(), r.l_d.item() + r.l_f.item() + r.l_l.item());
  EXPECT_EQ(r.l_g.item(), 0.0);

  auto cross = loss::cross_stream_loss(o, random_outputs(2, 3, 4, 2, rng), {});
  EXPECT_THROW(loss::total_stream_loss<double>(within, cross, cls, loss::StreamRole::teacher),
               ad::ContractError);
}

TEST(TotalStreamLoss, StudentIncludesCrossTerm) {
  std::mt19937_64 rng(15);
  auto t = random_outputs(2, 3, 4, 2, rng);
  auto s = random_outputs(2, 3, 4, 2, rng);
  std::vector<std::int32_t> labels{0, 1};
  auto r = loss::total_stream_loss<double>(loss::within_stream_loss(s, {}),
                                           loss::cross_stream_loss(t, s, {}),
                                           loss::classification_loss(s, labels),
                                           loss::StreamRole::student);
  const auto v = r.values();
  EXPECT_EQ(v.l_g, v.l_g1 + v.l_g2);
  EXPECT_NEAR(v.total, v.l_d + v.l_f + v.l_l + v.l_g, 1e-12);
  for (double x : {v.l_d, v.l_f, v.l_g1, v.l_g2, v.l_l}) EXPECT_GE(x, 0.0);
}

TEST(TotalStreamLoss, AllZeroComponentsGiveZero) {
  auto z = Tensord::scalar(0.0);
  auto r = loss::total_stream_loss<double>({z, z}, loss::CrossStreamLoss<double>{z, z, z}, z,
                                           loss::StreamRole::student);
  EXPECT_EQ(r.total.item(), 0.0);
}

TEST(TotalStreamLoss, WeightsScaleComponents) {
  std::mt19937_64 rng(16);
  auto s = random_outputs(2, 3, 4, 1, rng);
  std::vector<std::int32_t> labels{0, 1};
  loss::LossWeights w{0.5, 0.0, 1.0, 1.0, 2.0};
  auto within = loss::within_stream_loss(s, {});
  auto cls = loss::classification_loss(s, labels);
  auto r = loss::total_stream_loss<double>(within, std::nullopt, cls, loss::StreamRole::student, w);
  EXPECT_NEAR(r.total.item(), 0.5 * within.l_d.item() + 2.0 * cls.item(), 1e-12);
  // Components are reported unweighted.
  EXPECT_EQ(r.l_f.item(), within.l_f.item());
}
