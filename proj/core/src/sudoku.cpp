#include "utm/sudoku.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <functional>
#include <numeric>
#include <random>

namespace utm::sudoku {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Candidate bookkeeping with one bit per digit (bit d-1 for digit d).
class Board {
 public:
  Board(const Grid& grid, const Geometry& geo) : geo_(geo), grid_(grid) {
    full_ = static_cast<std::uint16_t>((1u << geo.n) - 1);
    for (int i = 0; i < geo_.cells(); ++i) {
      const int d = grid_[static_cast<std::size_t>(i)];
      if (d == 0) continue;
      if (d > geo_.n) {
        consistent_ = false;
        continue;
      }
      const auto bit = static_cast<std::uint16_t>(1u << (d - 1));
      const int r = i / geo_.n;
      const int c = i % geo_.n;
      if ((rows_[r] | cols_[c] | boxes_[box(r, c)]) & bit) consistent_ = false;
      place(i, d);
    }
  }

  bool consistent() const { return consistent_; }

  // Calls on_solution for every completion until it returns false.
  void search(const std::function<bool(const Grid&)>& on_solution) {
    if (!consistent_) return;
    stop_ = false;
    recurse(on_solution);
  }

 private:
  int box(int r, int c) const {
    return (r / geo_.box_rows) * (geo_.n / geo_.box_cols) + c / geo_.box_cols;
  }

  std::uint16_t candidates(int i) const {
    const int r = i / geo_.n;
    const int c = i % geo_.n;
    return static_cast<std::uint16_t>(full_ & ~(rows_[r] | cols_[c] | boxes_[box(r, c)]));
  }

  void place(int i, int d) {
    const auto bit = static_cast<std::uint16_t>(1u << (d - 1));
    const int r = i / geo_.n;
    const int c = i % geo_.n;
    rows_[r] |= bit;
    cols_[c] |= bit;
    boxes_[box(r, c)] |= bit;
    grid_[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(d);
  }

  void unplace(int i, int d) {
    const auto bit = static_cast<std::uint16_t>(~(1u << (d - 1)));
    const int r = i / geo_.n;
    const int c = i % geo_.n;
    rows_[r] &= bit;
    cols_[c] &= bit;
    boxes_[box(r, c)] &= bit;
    grid_[static_cast<std::size_t>(i)] = 0;
  }

  void recurse(const std::function<bool(const Grid&)>& on_solution) {
    int best = -1;
    int best_count = 99;
    std::uint16_t best_mask = 0;
    for (int i = 0; i < geo_.cells(); ++i) {
      if (grid_[static_cast<std::size_t>(i)] != 0) continue;
      const auto mask = candidates(i);
      const int count = std::popcount(mask);
      if (count < best_count) {
        best = i;
        best_count = count;
        best_mask = mask;
        if (count <= 1) break;
      }
    }
    if (best < 0) {
      if (!on_solution(grid_)) stop_ = true;
      return;
    }
    for (int d = 1; d <= geo_.n && !stop_; ++d) {
      if (!(best_mask & (1u << (d - 1)))) continue;
      place(best, d);
      recurse(on_solution);
      unplace(best, d);
    }
  }

  Geometry geo_;
  Grid grid_;
  std::array<std::uint16_t, 16> rows_{};
  std::array<std::uint16_t, 16> cols_{};
  std::array<std::uint16_t, 16> boxes_{};
  std::uint16_t full_ = 0;
  bool consistent_ = true;
  bool stop_ = false;
};

Grid random_complete_grid(const Geometry& geo, std::mt19937_64& rng) {
  Grid grid(static_cast<std::size_t>(geo.cells()), 0);
  std::vector<std::array<int, 9>> orders(static_cast<std::size_t>(geo.cells()));
  for (auto& o : orders) {
    std::iota(o.begin(), o.begin() + geo.n, 1);
    std::shuffle(o.begin(), o.begin() + geo.n, rng);
  }
  auto allowed = [&](int i, int d) {
    const int r = i / geo.n;
    const int c = i % geo.n;
    for (int k = 0; k < geo.n; ++k) {
      if (grid[static_cast<std::size_t>(r * geo.n + k)] == d) return false;
      if (grid[static_cast<std::size_t>(k * geo.n + c)] == d) return false;
    }
    const int br = r / geo.box_rows * geo.box_rows;
    const int bc = c / geo.box_cols * geo.box_cols;
    for (int rr = br; rr < br + geo.box_rows; ++rr) {
      for (int cc = bc; cc < bc + geo.box_cols; ++cc) {
        if (grid[static_cast<std::size_t>(rr * geo.n + cc)] == d) return false;
      }
    }
    return true;
  };
  std::function<bool(int)> fill = [&](int i) {
    if (i == geo.cells()) return true;
    for (int k = 0; k < geo.n; ++k) {
      const int d = orders[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
      if (!allowed(i, d)) continue;
      grid[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(d);
      if (fill(i + 1)) return true;
      grid[static_cast<std::size_t>(i)] = 0;
    }
    return false;
  };
  fill(0);
  return grid;
}

}  // namespace

Geometry Geometry::for_cells(int cells) {
  if (cells == 16) return micro();
  if (cells == 81) return full();
  throw DataError("no Sudoku geometry with " + std::to_string(cells) + " cells");
}

std::vector<std::uint8_t> Puzzle::givens_mask() const {
  std::vector<std::uint8_t> mask(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) mask[i] = grid[i] != 0 ? 1 : 0;
  return mask;
}

int Puzzle::givens() const {
  return static_cast<int>(std::count_if(grid.begin(), grid.end(), [](auto v) { return v != 0; }));
}

SolveResult solve_backtracking(const Grid& grid, const Geometry& geo, int limit) {
  if (static_cast<int>(grid.size()) != geo.cells()) {
    throw DataError("grid has " + std::to_string(grid.size()) + " cells, expected " +
                    std::to_string(geo.cells()));
  }
  SolveResult result;
  Board board(grid, geo);
  board.search([&](const Grid& solution) {
    if (result.count == 0) result.first = solution;
    ++result.count;
    return result.count < limit;
  });
  return result;
}

bool is_valid_solution(const Grid& grid, const Geometry& geo) {
  if (static_cast<int>(grid.size()) != geo.cells()) return false;
  for (auto v : grid) {
    if (v < 1 || v > geo.n) return false;
  }
  Board board(grid, geo);
  return board.consistent();
}

bool agrees_with(const Grid& grid, const Grid& solution) {
  if (grid.size() != solution.size()) return false;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] != 0 && grid[i] != solution[i]) return false;
  }
  return true;
}

std::vector<Grid> enumerate_complete_grids(const Geometry& geo) {
  std::vector<Grid> out;
  Board board(Grid(static_cast<std::size_t>(geo.cells()), 0), geo);
  board.search([&](const Grid& g) {
    out.push_back(g);
    return true;
  });
  return out;
}

Puzzle gen_micro_sudoku(std::uint64_t seed, int givens_min, int givens_max) {
  const Geometry geo = Geometry::micro();
  if (givens_min < 4 || givens_max > 12 || givens_min > givens_max) {
    throw DataError("givens range must satisfy 4 <= min <= max <= 12");
  }
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_int_distribution<int> target_dist(givens_min, givens_max);
  while (true) {
    Puzzle p;
    p.solution = random_complete_grid(geo, rng);
    p.grid = p.solution;
    const int target = target_dist(rng);
    std::vector<int> order(static_cast<std::size_t>(geo.cells()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    int givens = geo.cells();
    for (int cell : order) {
      if (givens <= target) break;
      const auto keep = p.grid[static_cast<std::size_t>(cell)];
      p.grid[static_cast<std::size_t>(cell)] = 0;
      if (solve_backtracking(p.grid, geo, 2).count == 1) {
        --givens;
      } else {
        p.grid[static_cast<std::size_t>(cell)] = keep;
      }
    }
    if (givens >= givens_min && givens <= givens_max) return p;
  }
}

std::vector<Puzzle> gen_micro_dataset(std::uint64_t seed, int count, int givens_min,
                                      int givens_max, std::span<const std::string> exclude) {
  std::vector<Puzzle> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; static_cast<int>(out.size()) < count; ++i) {
    auto p = gen_micro_sudoku(splitmix64(seed) ^ (i * 0x9e3779b97f4a7c15ULL), givens_min, givens_max);
    if (!exclude.empty() && std::binary_search(exclude.begin(), exclude.end(), to_string(p.grid))) {
      continue;
    }
    out.push_back(std::move(p));
  }
  return out;
}

Puzzle augment(const Puzzle& puzzle, const Geometry& geo, std::uint64_t seed, unsigned ops) {
  if (ops == kAugNone) return puzzle;
  std::mt19937_64 rng(splitmix64(seed));
  const int bands = geo.n / geo.box_rows;
  const int stacks = geo.n / geo.box_cols;

  std::vector<int> digit(static_cast<std::size_t>(geo.n + 1));
  std::iota(digit.begin(), digit.end(), 0);
  if (ops & kRelabelDigits) std::shuffle(digit.begin() + 1, digit.end(), rng);

  auto axis_map = [&](int groups, int per_group, bool permute_groups, bool permute_within) {
    std::vector<int> group_order(static_cast<std::size_t>(groups));
    std::iota(group_order.begin(), group_order.end(), 0);
    if (permute_groups) std::shuffle(group_order.begin(), group_order.end(), rng);
    std::vector<int> map;
    for (int g : group_order) {
      std::vector<int> within(static_cast<std::size_t>(per_group));
      std::iota(within.begin(), within.end(), 0);
      if (permute_within) std::shuffle(within.begin(), within.end(), rng);
      for (int w : within) map.push_back(g * per_group + w);
    }
    return map;
  };
  const auto row_map = axis_map(bands, geo.box_rows, ops & kPermuteBands, ops & kPermuteRowsInBands);
  const auto col_map =
      axis_map(stacks, geo.box_cols, ops & kPermuteStacks, ops & kPermuteColsInStacks);
  bool transpose = false;
  if ((ops & kTranspose) && geo.box_rows == geo.box_cols) {
    transpose = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  }

  auto remap = [&](const Grid& src) {
    Grid out(src.size());
    for (int r = 0; r < geo.n; ++r) {
      for (int c = 0; c < geo.n; ++c) {
        int sr = row_map[static_cast<std::size_t>(r)];
        int sc = col_map[static_cast<std::size_t>(c)];
        if (transpose) std::swap(sr, sc);
        const auto v = src[static_cast<std::size_t>(sr * geo.n + sc)];
        out[static_cast<std::size_t>(r * geo.n + c)] = static_cast<std::uint8_t>(digit[v]);
      }
    }
    return out;
  };
  return {remap(puzzle.grid), remap(puzzle.solution)};
}

std::string to_string(const Grid& grid) {
  std::string s(grid.size(), '0');
  for (std::size_t i = 0; i < grid.size(); ++i) s[i] = static_cast<char>('0' + grid[i]);
  return s;
}

Grid parse_grid(std::string_view text, const Geometry& geo) {
  if (static_cast<int>(text.size()) != geo.cells()) {
    throw DataError("grid string has " + std::to_string(text.size()) + " characters, expected " +
                    std::to_string(geo.cells()));
  }
  Grid g(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (ch == '.' || ch == '0') {
      g[i] = 0;
    } else if (ch >= '1' && ch <= '0' + geo.n) {
      g[i] = static_cast<std::uint8_t>(ch - '0');
    } else {
      throw DataError(std::string("invalid grid character '") + ch + "'");
    }
  }
  return g;
}

CsvReader::CsvReader(const std::filesystem::path& path, Geometry geo, bool strict)
    : in_(path), geo_(geo), strict_(strict) {
  if (!in_) throw DataError("cannot open CSV: " + path.string());
}

void CsvReader::problem(std::size_t row, const std::string& reason, bool malformed) {
  const std::string msg = "row " + std::to_string(row) + ": " + reason;
  if (malformed) {
    ++stats_.malformed;
  } else {
    ++stats_.inconsistent;
  }
  if (stats_.messages.size() < 20) stats_.messages.push_back(msg);
  if (strict_) throw DataError(msg);
}

std::optional<Puzzle> CsvReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    const std::size_t row = ++stats_.rows;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    std::vector<std::string_view> grids;
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      auto field = rest.substr(0, comma);
      while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
      while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
      const bool looks_like_grid =
          static_cast<int>(field.size()) == geo_.cells() &&
          field.find_first_not_of("0123456789.") == std::string_view::npos;
      if (looks_like_grid) grids.push_back(field);
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (grids.empty() && row == 1) continue;  // header
    if (grids.size() < 2) {
      problem(row, "expected puzzle and solution fields of " + std::to_string(geo_.cells()) +
                       " characters",
              true);
      continue;
    }
    Puzzle p;
    try {
      p.grid = parse_grid(grids[0], geo_);
      p.solution = parse_grid(grids[1], geo_);
    } catch (const DataError& e) {
      problem(row, e.what(), true);
      continue;
    }
    if (!is_valid_solution(p.solution, geo_)) {
      problem(row, "solution violates Sudoku constraints", false);
      continue;
    }
    if (!agrees_with(p.grid, p.solution)) {
      problem(row, "given cell disagrees with solution", false);
      continue;
    }
    ++stats_.accepted;
    return p;
  }
  return std::nullopt;
}

std::vector<Puzzle> load_csv(const std::filesystem::path& path, const Geometry& geo,
                             CsvStats* stats, bool strict) {
  CsvReader reader(path, geo, strict);
  std::vector<Puzzle> out;
  while (auto p = reader.next()) out.push_back(std::move(*p));
  if (stats) *stats = reader.stats();
  return out;
}

void write_csv(const std::filesystem::path& path, std::span<const Puzzle> puzzles) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write CSV: " + path.string());
  out << "puzzle,solution\n";
  for (const auto& p : puzzles) out << to_string(p.grid) << ',' << to_string(p.solution) << '\n';
}

PuzzleBatch make_batch(std::span<const Puzzle> puzzles) {
  PuzzleBatch b;
  b.batch = static_cast<int>(puzzles.size());
  b.cells = puzzles.empty() ? 0 : static_cast<int>(puzzles[0].grid.size());
  b.tokens.reserve(puzzles.size() * static_cast<std::size_t>(b.cells));
  b.targets.reserve(b.tokens.capacity());
  b.givens.reserve(b.tokens.capacity());
  for (const auto& p : puzzles) {
    if (static_cast<int>(p.grid.size()) != b.cells || p.solution.size() != p.grid.size()) {
      throw DataError("puzzles in a batch must share one size");
    }
    for (std::size_t i = 0; i < p.grid.size(); ++i) {
      b.tokens.push_back(p.grid[i]);
      b.targets.push_back(p.solution[i]);
      b.givens.push_back(p.grid[i] != 0 ? 1 : 0);
    }
  }
  return b;
}

Grid decode_tokens(std::span<const std::int32_t> tokens) {
  Grid g(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] > 9) throw DataError("token out of digit range");
    g[i] = static_cast<std::uint8_t>(tokens[i]);
  }
  return g;
}

}  // namespace utm::sudoku
