#pragma once

// Shared learnable lookup tables. Both encoders read and write the item
// table through gradients; the sequential path additionally uses positions
// and the mask vector. Item row 0 is the padding sentinel and stays zero.

#include <crossrec/autodiff.hpp>

#include <stdexcept>
#include <vector>

namespace crossrec {

using ad::Mat;
using ad::Parameter;
using ad::Tape;
using ad::Var;

class EmbeddingTables {
 public:
  EmbeddingTables(int num_users, int num_items, int max_len, int dim)
      : num_users_(num_users),
        num_items_(num_items),
        max_len_(max_len),
        dim_(dim),
        item_table("item_table", num_items + 1, dim),
        user_table("user_table", num_users, dim),
        position_table("position_table", max_len, dim),
        mask_vector("mask_vector", 1, dim) {}

  void init(std::uint64_t seed, double stddev = 0.02) {
    ad::init_normal(item_table, seed, stddev);
    ad::init_normal(user_table, seed, stddev);
    ad::init_normal(position_table, seed, stddev);
    ad::init_normal(mask_vector, seed, stddev);
    item_table.value.row(0).setZero();
  }

  int num_users() const { return num_users_; }
  int num_items() const { return num_items_; }
  int max_len() const { return max_len_; }
  int dim() const { return dim_; }
  int padded_rows() const { return num_items_ + 1; }

  // Item id [0, N) -> table row; row 0 is the padding sentinel.
  static int token_of(int item) { return item + 1; }

  // Row-gather from the item table; ids address table rows in [0, N+1).
  Var lookup_items(Tape& tape, const std::vector<int>& rows) {
    for (int r : rows)
      if (r < 0 || r >= padded_rows())
        throw std::out_of_range("lookup_items: row " + std::to_string(r) +
                                " out of range [0, " + std::to_string(padded_rows()) + ")");
    return tape.gather_rows(tape.use(item_table), rows);
  }

  Var lookup_users(Tape& tape, const std::vector<int>& ids) {
    for (int u : ids)
      if (u < 0 || u >= num_users_)
        throw std::out_of_range("lookup_users: id " + std::to_string(u) +
                                " out of range [0, " + std::to_string(num_users_) + ")");
    user_lookup_count_ += ids.size();
    return tape.gather_rows(tape.use(user_table), ids);
  }

  Var lookup_positions(Tape& tape, const std::vector<int>& slots) {
    for (int s : slots)
      if (s < 0 || s >= max_len_)
        throw std::out_of_range("lookup_positions: slot out of range");
    return tape.gather_rows(tape.use(position_table), slots);
  }

  // Adds positional rows 0..L-1 to an L x d sequence embedding (L <= c).
  Var position_aware(Tape& tape, Var seq_emb) {
    const auto rows = static_cast<int>(tape.val(seq_emb).rows());
    if (rows > max_len_)
      throw std::invalid_argument("position_aware: sequence longer than max_len");
    std::vector<int> slots(rows);
    for (int k = 0; k < rows; ++k) slots[k] = k;
    return tape.add(seq_emb, lookup_positions(tape, slots));
  }

  // Padding-row discipline around an optimizer step.
  void freeze_padding_grad() { item_table.grad.row(0).setZero(); }
  void enforce_padding_row() { item_table.value.row(0).setZero(); }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&item_table);
    out.push_back(&user_table);
    out.push_back(&position_table);
    out.push_back(&mask_vector);
  }

  // Counts user-table gathers; evaluation asserts it never moves.
  std::size_t user_lookup_count() const { return user_lookup_count_; }

  Parameter item_table;
  Parameter user_table;
  Parameter position_table;
  Parameter mask_vector;

 private:
  int num_users_, num_items_, max_len_, dim_;
  std::size_t user_lookup_count_{0};
};

}  // namespace crossrec
