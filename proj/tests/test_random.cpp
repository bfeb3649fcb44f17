#include "motionssm/parallel.hpp"
#include "motionssm/random.hpp"

#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <set>
#include <stdexcept>

using namespace motionssm;

TEST_CASE("philox4x32-10 known-answer vectors") {
  using A4 = std::array<std::uint32_t, 4>;
  CHECK(Philox4x32::block({0, 0, 0, 0}, {0, 0}) == A4{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
  CHECK(Philox4x32::block({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}) ==
        A4{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
  CHECK(Philox4x32::block({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}) ==
        A4{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("engine output is the block sequence of its counter") {
  Rng rng(0);
  const auto b0 = Philox4x32::block({0, 0, 0, 0}, {0, 0});
  const auto b1 = Philox4x32::block({1, 0, 0, 0}, {0, 0});
  for (int i = 0; i < 4; ++i) CHECK(rng() == b0[std::size_t(i)]);
  for (int i = 0; i < 4; ++i) CHECK(rng() == b1[std::size_t(i)]);
}

TEST_CASE("streams: deterministic, split children distinct") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a() == b());
  const Rng root(7);
  std::set<std::uint64_t> streams{root.stream()};
  for (std::uint64_t id = 0; id < 200; ++id) streams.insert(root.split(id).stream());
  CHECK(streams.size() == 201);
  Rng c1 = root.split(3), c2 = root.split(3), c3 = root.split(4);
  CHECK(c1() == c2());
  CHECK(c1() != c3());
  // a child does not depend on how far the parent has advanced
  Rng moved(7);
  for (int i = 0; i < 10; ++i) moved();
  Rng m3 = moved.split(3), r3 = root.split(3);
  for (int i = 0; i < 10; ++i) CHECK(m3() == r3());
}

TEST_CASE("uniform01 and standard_normal basic properties") {
  Rng rng(1);
  double sum = 0;
  for (int i = 0; i < 20000; ++i) {
    const double u = uniform01(rng);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
  }
  CHECK(sum / 20000 == doctest::Approx(0.5).epsilon(0.02));
  const Eigen::VectorXd z = standard_normal(rng, 40000);
  CHECK(std::abs(z.mean()) < 0.03);
  CHECK((z.array() - z.mean()).square().mean() == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("parallel_for: every index once, lowest failing index rethrown") {
  for (const char* threads : {"1", "4"}) {
    setenv("MOTIONSSM_THREADS", threads, 1);
    std::vector<std::atomic<int>> hits(257);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i]++; });
    for (auto& h : hits) CHECK(h.load() == 1);
    try {
      parallel_for(50, [](std::size_t i) {
        if (i == 13 || i == 31) throw std::runtime_error(std::to_string(i));
      });
      FAIL("expected an exception");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()) == "13");
    }
  }
  unsetenv("MOTIONSSM_THREADS");
  CHECK(worker_count() >= 1);
}
