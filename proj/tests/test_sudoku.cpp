#include <doctest.h>

#include <set>

#include "testing.hpp"
#include "utm/sudoku.hpp"

using namespace utm::sudoku;

namespace {

const Geometry kMicro = Geometry::micro();

std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(UTM_TEST_DATA_DIR) / name;
}

}  // namespace

TEST_CASE("solver counts") {
  SUBCASE("empty grid has many completions") {
    CHECK(solve_backtracking(Grid(16, 0), kMicro).count == 2);
  }
  SUBCASE("complete grid solves to itself") {
    const Grid g = parse_grid("1234341221434321", kMicro);
    const auto r = solve_backtracking(g, kMicro);
    CHECK(r.count == 1);
    CHECK(r.first == g);
  }
  SUBCASE("duplicate in a row has no solution") {
    CHECK(solve_backtracking(parse_grid("1100000000000000", kMicro), kMicro).count == 0);
  }
}

TEST_CASE("4x4 complete-grid enumeration gives 288") {
  const auto grids = enumerate_complete_grids(kMicro);
  CHECK(grids.size() == 288);
  std::set<Grid> unique(grids.begin(), grids.end());
  CHECK(unique.size() == 288);
  for (const auto& g : grids) CHECK(is_valid_solution(g, kMicro));
}

TEST_CASE("generated puzzles are unique-solution and seed-deterministic") {
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto p = gen_micro_sudoku(seed, 4, 12);
    CHECK(p.givens() >= 4);
    CHECK(p.givens() <= 12);
    const auto r = solve_backtracking(p.grid, kMicro);
    REQUIRE(r.count == 1);
    CHECK(r.first == p.solution);
    CHECK(agrees_with(p.grid, p.solution));
  }
  CHECK(gen_micro_sudoku(42, 6, 8).grid == gen_micro_sudoku(42, 6, 8).grid);
  const auto narrow = gen_micro_sudoku(7, 10, 10);
  CHECK(narrow.givens() == 10);
}

TEST_CASE("dataset generation honours the exclusion list") {
  const auto eval = gen_micro_dataset(1, 50, 4, 12);
  std::vector<std::string> held;
  for (const auto& p : eval) held.push_back(to_string(p.grid));
  std::sort(held.begin(), held.end());
  const auto train = gen_micro_dataset(1, 200, 4, 12, held);
  CHECK(train.size() == 200);
  for (const auto& p : train) CHECK_FALSE(std::binary_search(held.begin(), held.end(), to_string(p.grid)));
}

TEST_CASE("augmentation preserves validity and uniqueness") {
  const auto p = gen_micro_sudoku(3, 4, 8);
  CHECK(augment(p, kMicro, 5, kAugNone).grid == p.grid);
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto a = augment(p, kMicro, s);
    CHECK(is_valid_solution(a.solution, kMicro));
    CHECK(agrees_with(a.grid, a.solution));
    CHECK(a.givens() == p.givens());
    CHECK(solve_backtracking(a.grid, kMicro).count == 1);
  }
  // relabeling alone is a bijection on 1..n
  const auto r = augment(p, kMicro, 9, kRelabelDigits);
  std::map<int, int> mapping;
  for (std::size_t i = 0; i < p.solution.size(); ++i) {
    auto [it, fresh] = mapping.emplace(p.solution[i], r.solution[i]);
    CHECK(it->second == r.solution[i]);
  }
  std::set<int> images;
  for (auto [from, to] : mapping) images.insert(to);
  CHECK(images.size() == 4);
}

TEST_CASE("encoding round-trips") {
  const auto p = gen_micro_sudoku(8, 4, 12);
  const auto batch = make_batch(std::span(&p, 1));
  CHECK(decode_tokens(batch.tokens) == p.grid);
  CHECK(decode_tokens(batch.targets) == p.solution);
  for (auto t : batch.tokens) CHECK(t < kMicro.vocab());
  CHECK(kMicro.vocab() == 6);
  CHECK(Geometry::full().vocab() == 11);
  CHECK(parse_grid(to_string(p.grid), kMicro) == p.grid);
  CHECK(parse_grid("1...............", kMicro)[1] == 0);
}

TEST_CASE("CSV loader accepts the superset format and counts bad rows") {
  CsvStats stats;
  const auto puzzles = load_csv(fixture("extreme_sample.csv"), Geometry::full(), &stats);
  CHECK(puzzles.size() == 5);
  CHECK(stats.accepted == 5);
  CHECK(stats.malformed == 1);
  CHECK(stats.inconsistent == 2);
  REQUIRE_FALSE(stats.messages.empty());
  CHECK(stats.messages.front().rfind("row 6:", 0) == 0);
  CHECK(puzzles.back().givens() == 0);
  for (const auto& p : puzzles) CHECK(is_valid_solution(p.solution, Geometry::full()));

  CHECK_THROWS_AS(load_csv(fixture("extreme_sample.csv"), Geometry::full(), nullptr, true), DataError);
  CHECK(load_csv(fixture("plain_sample.csv"), Geometry::full()).size() == 2);
  CHECK_THROWS_AS(load_csv(fixture("missing.csv"), Geometry::full()), DataError);
}

TEST_CASE("CSV writer and reader agree") {
  const auto dir = utm::testing::temp_dir("csv");
  const auto set = gen_micro_dataset(4, 20, 4, 12);
  write_csv(dir / "micro.csv", set);
  const auto back = load_csv(dir / "micro.csv", kMicro);
  REQUIRE(back.size() == set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    CHECK(back[i].grid == set[i].grid);
    CHECK(back[i].solution == set[i].solution);
  }
}
