#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dtmap/data.hpp"

using namespace dtmap;

TEST_CASE("synthetic slots") {
  SyntheticFrameSource src({}, Rng(1));
  auto a = src.next_slot_frames(60, 0);
  auto b = src.next_slot_frames(60, 1);
  REQUIRE(a.size() == 60);
  for (std::size_t i = 0; i < 60; ++i) {
    CHECK(a[i]->id == i);
    CHECK(b[i]->id == 60 + i);
    CHECK(b[i]->slot_captured == 1);
  }
}

TEST_CASE("synthetic overlap arithmetic") {
  Rng rng(2);
  SynthParams p{.universe = 2000, .window = 30, .stride = 10, .jitter = 0.0};
  auto f = [&](std::uint64_t i) { return make_frame(i, synth_generate(p, i, rng)); };
  CHECK(edge_weight(*f(0), *f(1)) == 20);
  for (std::uint64_t k = 0; k < 5; ++k) {
    const std::size_t expect = k * 10 >= 30 ? 0 : 30 - k * 10;
    CHECK(edge_weight(*f(4), *f(4 + k)) == expect);
  }

  SynthParams wide{.universe = 2000, .window = 10, .stride = 12, .jitter = 0.0};
  CHECK(edge_weight(*make_frame(0, synth_generate(wide, 0, rng)), *make_frame(1, synth_generate(wide, 1, rng))) == 0);

  SynthParams still{.universe = 2000, .window = 10, .stride = 0, .jitter = 0.0};
  CHECK(synth_generate(still, 0, rng) == synth_generate(still, 57, rng));

  CHECK_THROWS_AS(synth_generate({.universe = 5, .window = 10, .stride = 1, .jitter = 0}, 0, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(synth_generate({.universe = 50, .window = 10, .stride = 1, .jitter = 1.5}, 0, rng),
                  std::invalid_argument);
}

TEST_CASE("jittered overlap follows the keep probability") {
  // Each shared point survives in both frames with probability 0.9² = 0.81.
  SynthParams p{.universe = 1000000, .window = 30, .stride = 10, .jitter = 0.1};
  Rng rng(3);
  FramePtr prev = make_frame(0, synth_generate(p, 0, rng));
  double total = 0.0;
  for (std::uint64_t i = 1; i <= 10000; ++i) {
    FramePtr cur = make_frame(i, synth_generate(p, i, rng));
    total += static_cast<double>(edge_weight(*prev, *cur));
    prev = cur;
  }
  CHECK(total / 10000.0 == doctest::Approx(0.81 * 20).epsilon(0.05));
}

TEST_CASE("synthetic determinism") {
  SyntheticFrameSource a({}, Rng(5)), b({}, Rng(5));
  auto fa = a.next_slot_frames(30, 0), fb = b.next_slot_frames(30, 0);
  for (std::size_t i = 0; i < 30; ++i) CHECK(fa[i]->points == fb[i]->points);
}

TEST_CASE("frame file round trip and errors") {
  std::vector<FrameRecord> recs{{0, {1, 2, 3}}, {4, {3, 9}}};
  std::stringstream ss;
  write_frame_file(ss, recs);
  CHECK(ss.str() == "0\t1,2,3\n4\t3,9\n");
  auto back = read_frame_file(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[1].id == 4);
  CHECK(back[1].points == std::vector<PointId>{3, 9});

  std::istringstream comments("# header\n1\t5\n\n2\t5,6\n");
  CHECK(read_frame_file(comments).size() == 2);

  std::istringstream unsorted("3\t1\n2\t1\n");
  CHECK_THROWS_AS(read_frame_file(unsorted), std::runtime_error);
  std::istringstream junk("1\tx,2\n");
  CHECK_THROWS_AS(read_frame_file(junk), std::runtime_error);
  std::istringstream empty_points("1\t\n");
  CHECK_THROWS_AS(read_frame_file(empty_points), std::runtime_error);
}

TEST_CASE("file source runs out") {
  std::vector<FrameRecord> recs;
  for (FrameId i = 0; i < 59; ++i) recs.push_back({i, {i, i + 1}});
  FileFrameSource src(recs);
  CHECK_THROWS_AS(src.next_slot_frames(60, 0), std::runtime_error);
  auto got = src.next_slot_frames(59, 2);
  CHECK(got.size() == 59);
  CHECK(got.back()->slot_captured == 2);
  CHECK(src.remaining() == 0);

  const auto path = std::filesystem::temp_directory_path() / "dtmap_frames_test.tsv";
  {
    std::ofstream out(path);
    write_frame_file(out, recs);
  }
  FileFrameSource from_disk(path);
  CHECK(from_disk.remaining() == 59);
  std::filesystem::remove(path);
}
