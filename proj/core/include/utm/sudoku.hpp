#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace utm::sudoku {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Board geometry: n x n grid made of box_rows x box_cols boxes.
struct Geometry {
  int n = 4;
  int box_rows = 2;
  int box_cols = 2;

  int cells() const { return n * n; }
  // Token id reserved for padding; never emitted by the encoder.
  int pad_token() const { return n + 1; }
  int vocab() const { return n + 2; }

  static Geometry micro() { return {4, 2, 2}; }
  static Geometry full() { return {9, 3, 3}; }
  // 16 -> micro, 81 -> full.
  static Geometry for_cells(int cells);
};

// Cell values: 0 is blank, 1..n are digits.
using Grid = std::vector<std::uint8_t>;

struct Puzzle {
  Grid grid;
  Grid solution;

  std::vector<std::uint8_t> givens_mask() const;
  int givens() const;
};

struct SolveResult {
  int count = 0;  // capped at the requested limit
  Grid first;
};

// Exhaustive backtracking (most-constrained cell first). Stops after `limit`
// solutions; contradictory givens yield count 0.
SolveResult solve_backtracking(const Grid& grid, const Geometry& geo, int limit = 2);

// Every row, column and box holds each digit exactly once.
bool is_valid_solution(const Grid& grid, const Geometry& geo);
// Grid agrees with solution on every given cell.
bool agrees_with(const Grid& grid, const Grid& solution);

// All complete grids, by brute-force enumeration. Only sensible for 4x4.
std::vector<Grid> enumerate_complete_grids(const Geometry& geo);

// One 4x4 puzzle with a unique solution and a givens count inside
// [givens_min, givens_max] (4 <= min <= max <= 12). Deterministic in seed.
Puzzle gen_micro_sudoku(std::uint64_t seed, int givens_min, int givens_max);

// `count` puzzles from independent per-index seeds derived from `seed`,
// skipping any whose grid is in `exclude` (sorted grid strings).
std::vector<Puzzle> gen_micro_dataset(std::uint64_t seed, int count, int givens_min,
                                      int givens_max,
                                      std::span<const std::string> exclude = {});

enum AugmentOps : unsigned {
  kAugNone = 0,
  kRelabelDigits = 1u << 0,
  kPermuteBands = 1u << 1,
  kPermuteStacks = 1u << 2,
  kPermuteRowsInBands = 1u << 3,
  kPermuteColsInStacks = 1u << 4,
  kTranspose = 1u << 5,
  kAugAll = 0x3f,
};

// Random composition of the selected validity-preserving symmetries.
// Transpose is only applied when boxes are square.
Puzzle augment(const Puzzle& puzzle, const Geometry& geo, std::uint64_t seed,
               unsigned ops = kAugAll);

// Text form: one character per cell, '0' for blank.
std::string to_string(const Grid& grid);
// Accepts '0' or '.' for blanks.
Grid parse_grid(std::string_view text, const Geometry& geo);

struct CsvStats {
  std::size_t rows = 0;
  std::size_t accepted = 0;
  std::size_t malformed = 0;
  std::size_t inconsistent = 0;
  std::vector<std::string> messages;  // first few problems, "row N: reason"
};

// Streams puzzles from CSV. A row is any comma-separated line whose first two
// fields that look like grids (exactly L characters from "0123456789.") are
// the puzzle and its solution; other fields (source, rating, ...) are
// ignored. A leading header line without grid fields is skipped. Malformed
// rows and rows whose solution is invalid or contradicts a given are counted
// and skipped, or throw DataError naming the row when strict.
class CsvReader {
 public:
  CsvReader(const std::filesystem::path& path, Geometry geo, bool strict = false);

  std::optional<Puzzle> next();
  const CsvStats& stats() const { return stats_; }

 private:
  void problem(std::size_t row, const std::string& reason, bool malformed);

  std::ifstream in_;
  Geometry geo_;
  bool strict_;
  CsvStats stats_;
};

std::vector<Puzzle> load_csv(const std::filesystem::path& path, const Geometry& geo,
                             CsvStats* stats = nullptr, bool strict = false);
void write_csv(const std::filesystem::path& path, std::span<const Puzzle> puzzles);

// Integer-encoded batch, row-major [batch x cells].
struct PuzzleBatch {
  int batch = 0;
  int cells = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> givens;
};

PuzzleBatch make_batch(std::span<const Puzzle> puzzles);
// Inverse of the token encoding for one row of a batch.
Grid decode_tokens(std::span<const std::int32_t> tokens);

}  // namespace utm::sudoku
