#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <set>

#include "test_util.hpp"
#include "vqct/phantom.hpp"
#include "vqct/volume.hpp"

using namespace vqct;
using vqct::testing::random_volume;

TEST(Mvol, PayloadSizeAndRoundTrip) {
  const Volume zero({2, 2, 2}, {1, 1, 1}, IntensitySpace::HU);
  const std::string bytes = serialize_volume(zero);
  const std::size_t hlen = io::get_u32(reinterpret_cast<const unsigned char*>(bytes.data()) + 8);
  EXPECT_EQ(bytes.size() - 12 - hlen, 32u);

  std::mt19937_64 rng(1);
  Volume v = random_volume({5, 4, 3}, rng, -1000, 3000);
  v.spacing_mm = {0.7, 1.5, 2.5};
  v.space = IntensitySpace::Activity;
  v.activity_reference = 3.25;
  const auto back = deserialize_volume(serialize_volume(v));
  EXPECT_EQ(back.voxels, v.voxels);
  EXPECT_EQ(back.dims, v.dims);
  EXPECT_EQ(back.spacing_mm, v.spacing_mm);
  EXPECT_EQ(back.space, v.space);
  EXPECT_EQ(back.activity_reference, v.activity_reference);

  const auto path = (std::filesystem::temp_directory_path() / "vqct_volume_test.mvol").string();
  write_volume(v, path);
  EXPECT_EQ(read_volume(path).voxels, v.voxels);
  std::filesystem::remove(path);
}

TEST(Mvol, MalformedFilesAreFormatErrors) {
  const Volume v({2, 2, 2}, {1, 1, 1}, IntensitySpace::HU);
  std::string bytes = serialize_volume(v);
  EXPECT_THROW(deserialize_volume(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(deserialize_volume(bytes + "abcd"), FormatError);
  EXPECT_THROW(deserialize_volume("VQCK0001" + bytes.substr(8)), FormatError);
  std::string h = R"({"dims":[0,2,2],"spacing_mm":[1,1,1],"intensity_space":"HU"})";
  std::string framed = io::frame(kVolumeMagic, h, "");
  EXPECT_THROW(deserialize_volume(framed), FormatError);
  h = R"({"dims":[1,1,1],"spacing_mm":[1,1,1],"intensity_space":"bogus"})";
  EXPECT_THROW(deserialize_volume(io::frame(kVolumeMagic, h, std::string(4, '\0'))), FormatError);
  EXPECT_THROW(read_volume("/nonexistent/v.mvol"), IoError);
}

TEST(Resample, IdentityConstantAndRamp) {
  std::mt19937_64 rng(2);
  const Volume v = random_volume({6, 5, 4}, rng, -100, 100);
  EXPECT_EQ(resample_trilinear(v, v.spacing_mm).voxels, v.voxels);

  Volume c({5, 5, 5}, {2, 2, 2}, IntensitySpace::HU, 42.0f);
  for (float x : resample_trilinear(c, {0.7, 1.3, 3.0}).voxels) EXPECT_FLOAT_EQ(x, 42.0f);

  // f(x, y, z) = 3x - 2y + 0.5z + 7 in mm; halve the spacing.
  Volume ramp({8, 7, 6}, {2, 2, 2}, IntensitySpace::HU);
  auto f = [](double x, double y, double z) { return 3 * x - 2 * y + 0.5 * z + 7; };
  for (std::size_t z = 0; z < 6; ++z)
    for (std::size_t y = 0; y < 7; ++y)
      for (std::size_t x = 0; x < 8; ++x) ramp.at(x, y, z) = static_cast<float>(f(2.0 * x, 2.0 * y, 2.0 * z));
  const Volume fine = resample_trilinear(ramp, {1, 1, 1});
  ASSERT_EQ(fine.dims, (Dims{16, 14, 12}));
  for (std::size_t z = 0; z < 12; ++z)
    for (std::size_t y = 0; y < 14; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        // Beyond the last input sample the border value is held.
        const double mx = std::min(x * 1.0, 14.0), my = std::min(y * 1.0, 12.0), mz = std::min(z * 1.0, 10.0);
        EXPECT_NEAR(fine.at(x, y, z), f(mx, my, mz), 1e-5 * std::max(1.0, std::abs(f(mx, my, mz))));
      }
  EXPECT_THROW(resample_trilinear(ramp, {1, 0, 1}), DomainError);
}

TEST(Normalize, AnchorsAndRoundTrip) {
  Volume v({3, 1, 1}, {1, 1, 1}, IntensitySpace::HU);
  v.voxels = {-1024.0f, 2976.0f, 976.0f};
  const Volume u = normalize(v, IntensitySpace::Unit01);
  EXPECT_EQ(u.voxels[0], 0.0f);
  EXPECT_EQ(u.voxels[1], 1.0f);
  EXPECT_EQ(u.voxels[2], 0.5f);
  const Volume s = normalize(v, IntensitySpace::Sym11);
  EXPECT_EQ(s.voxels[0], -1.0f);
  EXPECT_EQ(s.voxels[2], 0.0f);

  std::mt19937_64 rng(3);
  const Volume r = random_volume({9, 8, 7}, rng, -1024, 2976);
  for (auto mode : {IntensitySpace::Unit01, IntensitySpace::Sym11}) {
    const Volume back = denormalize(normalize(r, mode));
    EXPECT_EQ(back.space, IntensitySpace::HU);
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(back.voxels[i], r.voxels[i], 1e-3);
  }
  // Clamping outside the window.
  Volume wide({2, 1, 1}, {1, 1, 1}, IntensitySpace::HU);
  wide.voxels = {-3000.0f, 3071.0f};
  const Volume wn = normalize(wide, IntensitySpace::Unit01);
  EXPECT_EQ(wn.voxels[0], 0.0f);
  EXPECT_EQ(wn.voxels[1], 1.0f);
  EXPECT_THROW(normalize(u, IntensitySpace::Unit01), DomainError);
}

TEST(Normalize, ActivityUsesPercentileReference) {
  Volume pet({200, 1, 1}, {1, 1, 1}, IntensitySpace::Activity);
  for (std::size_t i = 0; i < 200; ++i) pet.voxels[i] = static_cast<float>(i + 1);
  // Nearest rank: ceil(0.995 * 200) = 199.
  EXPECT_EQ(percentile(pet.voxels, 99.5), 199.0);
  const Volume n = normalize(pet, IntensitySpace::Sym11);
  ASSERT_TRUE(n.activity_reference.has_value());
  EXPECT_EQ(*n.activity_reference, 199.0);
  EXPECT_EQ(n.voxels[199], 1.0f);
  EXPECT_EQ(n.voxels[198], 1.0f);
  const Volume back = denormalize(n);
  EXPECT_EQ(back.space, IntensitySpace::Activity);
  for (std::size_t i = 0; i < 199; ++i) EXPECT_NEAR(back.voxels[i], pet.voxels[i], 1e-4);
  const Volume flat({4, 1, 1}, {1, 1, 1}, IntensitySpace::Activity);
  EXPECT_THROW(normalize(flat, IntensitySpace::Unit01), DomainError);
  EXPECT_THROW(normalize(pet, IntensitySpace::HU), DomainError);
}

TEST(Symmetry, GroupOfOrder48) {
  Volume v({3, 4, 5}, {1, 2, 3}, IntensitySpace::HU);
  for (std::size_t i = 0; i < v.size(); ++i) v.voxels[i] = static_cast<float>(i);
  EXPECT_EQ(apply_symmetry(v, 0).voxels, v.voxels);
  std::set<std::vector<float>> seen;
  auto sorted = v.voxels;
  for (int e = 0; e < 48; ++e) {
    const Volume a = apply_symmetry(v, e);
    auto s = a.voxels;
    std::sort(s.begin(), s.end());
    EXPECT_EQ(s, sorted);
    const Volume back = apply_symmetry(a, inverse_symmetry(e));
    EXPECT_EQ(back.voxels, v.voxels);
    EXPECT_EQ(back.dims, v.dims);
    EXPECT_EQ(back.spacing_mm, v.spacing_mm);
    Volume tagged = a;
    tagged.voxels.push_back(static_cast<float>(a.dims[0] * 100 + a.dims[1] * 10 + a.dims[2]));
    seen.insert(tagged.voxels);
  }
  EXPECT_EQ(seen.size(), 48u);
  // Closure: a composition of two elements equals a single element.
  Volume cube({3, 3, 3}, {1, 1, 1}, IntensitySpace::HU);
  for (std::size_t i = 0; i < cube.size(); ++i) cube.voxels[i] = static_cast<float>(i);
  for (int a = 0; a < 48; a += 5)
    for (int b = 0; b < 48; b += 7) {
      const auto composed = apply_symmetry(apply_symmetry(cube, a), b).voxels;
      bool found = false;
      for (int e = 0; e < 48 && !found; ++e) found = apply_symmetry(cube, e).voxels == composed;
      EXPECT_TRUE(found);
    }
  EXPECT_THROW(symmetry(48), DomainError);
}

TEST(Symmetry, AugmentIsSeededAndUniformish) {
  std::mt19937_64 rng(4);
  const Volume v = random_volume({4, 4, 4}, rng, 0, 1, IntensitySpace::Unit01);
  EXPECT_EQ(augment(v, 9).voxels, augment(v, 9).voxels);
  std::vector<int> hits(48, 0);
  for (std::uint64_t s = 0; s < 4800; ++s) ++hits[static_cast<std::size_t>(augmentation_element(s))];
  for (int h : hits) EXPECT_GT(h, 50);
}

TEST(Cubes, CountsAndRoundTrip) {
  Volume v64({64, 64, 64}, {1, 1, 1}, IntensitySpace::Unit01);
  const auto one = extract_cubes(v64, 64);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].origin, (Dims{0, 0, 0}));
  EXPECT_EQ(extract_cubes(Volume({65, 65, 65}, {1, 1, 1}, IntensitySpace::Unit01), 64).size(), 8u);
  EXPECT_THROW(extract_cubes(v64, 7), DomainError);

  std::mt19937_64 rng(5);
  const Volume v = random_volume({19, 9, 17}, rng, -1, 1, IntensitySpace::Sym11);
  const auto cubes = extract_cubes(v, 8, -1.0f);
  EXPECT_EQ(cubes.size(), 3u * 2u * 3u);
  EXPECT_EQ(cubes[1].origin, (Dims{8, 0, 0}));
  EXPECT_EQ(cubes.back().volume.at(7, 7, 7), -1.0f);  // padding
  const Volume back = stitch_cubes(cubes, v.dims, v.spacing_mm, v.space);
  EXPECT_EQ(back.voxels, v.voxels);
}

TEST(Phantom, GeometryValuesAndDeterminism) {
  const Dims d{48, 40, 36};
  const auto p = generate_phantom_pair(d, 7);
  const auto& g = p.truth.geometry;
  for (const auto& lung : g.lungs) {
    const auto x = static_cast<std::size_t>(std::lround(lung.center[0]));
    const auto y = static_cast<std::size_t>(std::lround(lung.center[1]));
    const auto z = static_cast<std::size_t>(std::lround(lung.center[2]));
    EXPECT_EQ(p.truth.labels[p.ct.index(x, y, z)], Tissue::Lung);
    EXPECT_LE(p.ct.at(x, y, z), -600.0f);
  }
  EXPECT_EQ(p.ct.at(0, 0, 0), -1000.0f);
  EXPECT_EQ(p.pet.space, IntensitySpace::Activity);
  std::array<std::size_t, 4> counts{};
  for (auto t : p.truth.labels) ++counts[static_cast<std::size_t>(t)];
  for (auto c : counts) EXPECT_GT(c, 0u);
  double bone = 0, soft = 0;
  std::size_t nb = 0, ns = 0;
  for (std::size_t i = 0; i < p.ct.size(); ++i) {
    if (p.truth.labels[i] == Tissue::Bone) bone += p.ct.voxels[i], ++nb;
    if (p.truth.labels[i] == Tissue::Soft) soft += p.ct.voxels[i], ++ns;
  }
  EXPECT_NEAR(bone / nb, 700.0, 20.0);
  EXPECT_NEAR(soft / ns, 40.0, 20.0);
  EXPECT_FALSE(g.lesions.empty());

  const auto q = generate_phantom_pair(d, 7);
  EXPECT_EQ(q.ct.voxels, p.ct.voxels);
  EXPECT_EQ(q.pet.voxels, p.pet.voxels);
  EXPECT_EQ(truth_to_json(q.truth).dump(), truth_to_json(p.truth).dump());
  EXPECT_NE(generate_phantom_pair(d, 8).ct.voxels, p.ct.voxels);
  EXPECT_THROW(generate_phantom_pair({31, 40, 40}, 1), DomainError);
}

TEST(Phantom, TextureVolumesAreSeededAndInRange) {
  const auto a = generate_texture_volume({16, 16, 16}, 3);
  EXPECT_EQ(a.voxels, generate_texture_volume({16, 16, 16}, 3).voxels);
  EXPECT_NE(a.voxels, generate_texture_volume({16, 16, 16}, 4).voxels);
  for (float v : a.voxels) {
    EXPECT_GE(v, kHuMin);
    EXPECT_LE(v, kHuMax);
  }
}
