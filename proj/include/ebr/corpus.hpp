#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ebr/common.hpp"

namespace ebr {

struct Interaction {
    std::int64_t user_id = 0;
    std::int64_t item_id = 0;
    std::int64_t timestamp = 0;
    std::optional<double> weight;
};

// Bidirectional external <-> dense internal id map.
class IdMap {
public:
    std::uint32_t intern(std::int64_t external);
    std::optional<std::uint32_t> find(std::int64_t external) const;
    std::int64_t external(std::uint32_t internal) const { return to_external_.at(internal); }
    std::size_t size() const noexcept { return to_external_.size(); }
    const std::vector<std::int64_t>& externals() const noexcept { return to_external_; }

    static IdMap from_externals(std::vector<std::int64_t> externals);

    bool operator==(const IdMap& other) const { return to_external_ == other.to_external_; }

private:
    std::vector<std::int64_t> to_external_;
    std::unordered_map<std::int64_t, std::uint32_t> to_internal_;
};

// Per-user chronological item sequences over dense indices.
struct Dataset {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::vector<std::vector<ItemIndex>> sequences;
    std::vector<std::vector<std::int64_t>> timestamps;
    IdMap users;
    IdMap items;

    std::size_t num_interactions() const;

    // Builds a dataset from raw interactions: dense reindexing in order of first
    // appearance, stable sort by timestamp within each user.
    static Dataset from_interactions(std::span<const Interaction> rows);

    // Builds from already-dense sequences (no timestamps; position is time).
    static Dataset from_sequences(std::vector<std::vector<ItemIndex>> seqs, std::size_t num_items);

    // Throws InputError if any Dataset invariant is violated.
    void validate() const;

    bool operator==(const Dataset& other) const = default;
};

inline constexpr ItemIndex kNoItem = static_cast<ItemIndex>(-1);

struct Split {
    Dataset train;
    std::vector<ItemIndex> valid_target; // kNoItem for ineligible users
    std::vector<ItemIndex> test_target;  // kNoItem for ineligible users
    std::vector<UserIndex> eligible_users;

    bool is_eligible(UserIndex u) const { return valid_target[u] != kNoItem; }
};

Interaction parse_movielens_line(std::string_view line, std::size_t line_no);
Dataset parse_movielens(const std::filesystem::path& path);

struct EventLogSchema {
    char delimiter = ',';
    std::string user_column = "user_id";
    std::string item_column = "item_id";
    std::string timestamp_column = "time_ms";
    std::string label_column;    // optional
    std::string scenario_column; // optional
};

// Conjunction of column == value tests, e.g. "is_click=1,tab=1".
struct PositiveFilter {
    std::vector<std::pair<std::string, std::string>> equals;

    static PositiveFilter parse(std::string_view spec);
};

Dataset parse_event_log(const std::filesystem::path& path, const EventLogSchema& schema,
                        const PositiveFilter& filter);

// Iteratively drops items with frequency < min_item_freq and users with
// frequency < min_user_freq until both hold, then reindexes densely.
Dataset filter_by_frequency(const Dataset& d, std::size_t min_item_freq, std::size_t min_user_freq);

// Last interaction -> test, penultimate -> validation; users with fewer than
// three interactions stay whole in train and are not evaluated.
Split leave_last_out_split(const Dataset& d);

// Binary cache with magic "EBRDS1".
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

void write_movielens(const Dataset& d, const std::filesystem::path& path);

} // namespace ebr
