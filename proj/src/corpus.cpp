#include "ebr/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ebr/binary_io.hpp"

namespace ebr {

namespace {

constexpr std::string_view kDatasetMagic = "EBRDS1";

template <typename Int>
bool parse_int(std::string_view s, Int& out) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '"')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '"'))
        s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split(std::string_view line, char delim) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        std::size_t pos = line.find(delim, start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

// Rebuilds a dataset keeping only the given users and items, reindexed in
// ascending order of their old indices.
Dataset restrict(const Dataset& d, const std::vector<bool>& keep_user, const std::vector<bool>& keep_item) {
    std::vector<std::uint32_t> item_remap(d.num_items, static_cast<std::uint32_t>(-1));
    std::vector<std::int64_t> item_ext;
    for (std::size_t i = 0; i < d.num_items; ++i) {
        if (!keep_item[i]) continue;
        item_remap[i] = static_cast<std::uint32_t>(item_ext.size());
        item_ext.push_back(d.items.external(static_cast<std::uint32_t>(i)));
    }
    Dataset out;
    std::vector<std::int64_t> user_ext;
    for (std::size_t u = 0; u < d.num_users; ++u) {
        if (!keep_user[u]) continue;
        std::vector<ItemIndex> seq;
        std::vector<std::int64_t> ts;
        for (std::size_t p = 0; p < d.sequences[u].size(); ++p) {
            ItemIndex it = d.sequences[u][p];
            if (item_remap[it] == static_cast<std::uint32_t>(-1)) continue;
            seq.push_back(item_remap[it]);
            ts.push_back(d.timestamps[u][p]);
        }
        if (seq.empty()) continue;
        user_ext.push_back(d.users.external(static_cast<std::uint32_t>(u)));
        out.sequences.push_back(std::move(seq));
        out.timestamps.push_back(std::move(ts));
    }
    out.num_users = out.sequences.size();
    out.num_items = item_ext.size();
    out.users = IdMap::from_externals(std::move(user_ext));
    out.items = IdMap::from_externals(std::move(item_ext));
    return out;
}

} // namespace

std::uint32_t IdMap::intern(std::int64_t external) {
    auto [it, inserted] = to_internal_.try_emplace(external, static_cast<std::uint32_t>(to_external_.size()));
    if (inserted) to_external_.push_back(external);
    return it->second;
}

std::optional<std::uint32_t> IdMap::find(std::int64_t external) const {
    auto it = to_internal_.find(external);
    if (it == to_internal_.end()) return std::nullopt;
    return it->second;
}

IdMap IdMap::from_externals(std::vector<std::int64_t> externals) {
    IdMap m;
    m.to_internal_.reserve(externals.size());
    for (std::size_t i = 0; i < externals.size(); ++i) {
        if (!m.to_internal_.emplace(externals[i], static_cast<std::uint32_t>(i)).second)
            throw InputError("duplicate external id " + std::to_string(externals[i]));
    }
    m.to_external_ = std::move(externals);
    return m;
}

std::size_t Dataset::num_interactions() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
}

Dataset Dataset::from_interactions(std::span<const Interaction> rows) {
    if (rows.empty()) throw EmptyDatasetError("no interactions");
    Dataset d;
    struct Event {
        std::int64_t t;
        ItemIndex item;
    };
    std::vector<std::vector<Event>> per_user;
    for (const auto& r : rows) {
        std::uint32_t u = d.users.intern(r.user_id);
        ItemIndex i = d.items.intern(r.item_id);
        if (u >= per_user.size()) per_user.resize(u + 1);
        per_user[u].push_back({r.timestamp, i});
    }
    d.num_users = d.users.size();
    d.num_items = d.items.size();
    d.sequences.resize(d.num_users);
    d.timestamps.resize(d.num_users);
    for (std::size_t u = 0; u < d.num_users; ++u) {
        auto& ev = per_user[u];
        std::stable_sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
        d.sequences[u].reserve(ev.size());
        d.timestamps[u].reserve(ev.size());
        for (const auto& e : ev) {
            d.sequences[u].push_back(e.item);
            d.timestamps[u].push_back(e.t);
        }
    }
    return d;
}

Dataset Dataset::from_sequences(std::vector<std::vector<ItemIndex>> seqs, std::size_t num_items) {
    Dataset d;
    d.num_users = seqs.size();
    d.num_items = num_items;
    d.timestamps.resize(seqs.size());
    std::vector<std::int64_t> uext(seqs.size());
    std::iota(uext.begin(), uext.end(), 0);
    std::vector<std::int64_t> iext(num_items);
    std::iota(iext.begin(), iext.end(), 0);
    for (std::size_t u = 0; u < seqs.size(); ++u) {
        d.timestamps[u].resize(seqs[u].size());
        std::iota(d.timestamps[u].begin(), d.timestamps[u].end(), 0);
    }
    d.sequences = std::move(seqs);
    d.users = IdMap::from_externals(std::move(uext));
    d.items = IdMap::from_externals(std::move(iext));
    d.validate();
    return d;
}

void Dataset::validate() const {
    if (sequences.size() != num_users || timestamps.size() != num_users)
        throw InputError("dataset: sequence count does not match num_users");
    if (users.size() != num_users || items.size() != num_items) throw InputError("dataset: id map size mismatch");
    for (std::size_t u = 0; u < num_users; ++u) {
        const auto& s = sequences[u];
        if (s.empty()) throw InputError("dataset: user " + std::to_string(u) + " has an empty sequence");
        if (timestamps[u].size() != s.size()) throw InputError("dataset: timestamp count mismatch");
        for (std::size_t p = 0; p < s.size(); ++p) {
            if (s[p] >= num_items) throw InputError("dataset: item index out of range");
            if (timestamps[u][p] < 0) throw InputError("dataset: negative timestamp");
            if (p > 0 && timestamps[u][p] < timestamps[u][p - 1])
                throw InputError("dataset: sequence not ordered by timestamp");
        }
    }
}

Interaction parse_movielens_line(std::string_view line, std::size_t line_no) {
    std::string_view fields[4];
    std::size_t start = 0;
    for (int f = 0; f < 4; ++f) {
        std::size_t pos = f < 3 ? line.find("::", start) : std::string_view::npos;
        if (f < 3 && pos == std::string_view::npos)
            throw ParseError(line_no, "expected UserID::MovieID::Rating::Timestamp");
        fields[f] = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
        start = pos + 2;
    }
    if (fields[3].find("::") != std::string_view::npos) throw ParseError(line_no, "too many fields");
    Interaction r;
    if (!parse_int(fields[0], r.user_id)) throw ParseError(line_no, "bad UserID");
    if (!parse_int(fields[1], r.item_id)) throw ParseError(line_no, "bad MovieID");
    double rating = 0;
    {
        std::string tmp(trim(fields[2]));
        std::istringstream ss(tmp);
        if (!(ss >> rating) || !ss.eof()) throw ParseError(line_no, "bad Rating");
    }
    r.weight = rating;
    if (!parse_int(fields[3], r.timestamp)) throw ParseError(line_no, "bad Timestamp");
    if (r.timestamp < 0) throw ParseError(line_no, "negative Timestamp");
    return r;
}

Dataset parse_movielens(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    std::vector<Interaction> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        rows.push_back(parse_movielens_line(line, line_no));
    }
    if (rows.empty()) throw EmptyDatasetError(path.string() + ": no ratings");
    return Dataset::from_interactions(rows);
}

PositiveFilter PositiveFilter::parse(std::string_view spec) {
    PositiveFilter f;
    for (auto term : split(spec, ',')) {
        term = trim(term);
        if (term.empty()) continue;
        auto eq = term.find('=');
        if (eq == std::string_view::npos || eq == 0)
            throw ConfigError("filter term \"" + std::string(term) + "\" is not column=value");
        f.equals.emplace_back(std::string(trim(term.substr(0, eq))), std::string(trim(term.substr(eq + 1))));
    }
    return f;
}

Dataset parse_event_log(const std::filesystem::path& path, const EventLogSchema& schema,
                        const PositiveFilter& filter) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw EmptyDatasetError(path.string() + ": empty file");
    auto header = split(line, schema.delimiter);
    auto column = [&](const std::string& name) -> std::size_t {
        for (std::size_t c = 0; c < header.size(); ++c)
            if (trim(header[c]) == name) return c;
        throw SchemaError(path.string() + ": missing column \"" + name + "\"");
    };
    std::size_t cu = column(schema.user_column);
    std::size_t ci = column(schema.item_column);
    std::size_t ct = column(schema.timestamp_column);
    if (!schema.label_column.empty()) column(schema.label_column);
    if (!schema.scenario_column.empty()) column(schema.scenario_column);
    std::vector<std::pair<std::size_t, std::string>> tests;
    for (const auto& [name, value] : filter.equals) tests.emplace_back(column(name), value);
    std::size_t width = header.size();

    std::vector<Interaction> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto f = split(line, schema.delimiter);
        if (f.size() != width)
            throw ParseError(line_no, "expected " + std::to_string(width) + " fields, got " + std::to_string(f.size()));
        bool keep = true;
        for (const auto& [c, v] : tests) {
            if (trim(f[c]) != v) {
                keep = false;
                break;
            }
        }
        if (!keep) continue;
        Interaction r;
        if (!parse_int(trim(f[cu]), r.user_id)) throw ParseError(line_no, "non-integer user id");
        if (!parse_int(trim(f[ci]), r.item_id)) throw ParseError(line_no, "non-integer item id");
        if (!parse_int(trim(f[ct]), r.timestamp)) throw ParseError(line_no, "non-integer timestamp");
        if (r.timestamp < 0) throw ParseError(line_no, "negative timestamp");
        rows.push_back(r);
    }
    if (rows.empty()) throw EmptyDatasetError(path.string() + ": no rows pass the filter");
    return Dataset::from_interactions(rows);
}

Dataset filter_by_frequency(const Dataset& d, std::size_t min_item_freq, std::size_t min_user_freq) {
    std::vector<bool> keep_user(d.num_users, true);
    std::vector<bool> keep_item(d.num_items, true);
    for (bool changed = true; changed;) {
        changed = false;
        std::vector<std::size_t> item_freq(d.num_items, 0);
        std::vector<std::size_t> user_freq(d.num_users, 0);
        for (std::size_t u = 0; u < d.num_users; ++u) {
            if (!keep_user[u]) continue;
            for (ItemIndex i : d.sequences[u]) {
                if (!keep_item[i]) continue;
                ++user_freq[u];
            }
        }
        for (std::size_t u = 0; u < d.num_users; ++u) {
            if (keep_user[u] && user_freq[u] < std::max<std::size_t>(min_user_freq, 1)) {
                keep_user[u] = false;
                changed = true;
            }
        }
        for (std::size_t u = 0; u < d.num_users; ++u) {
            if (!keep_user[u]) continue;
            for (ItemIndex i : d.sequences[u])
                if (keep_item[i]) ++item_freq[i];
        }
        for (std::size_t i = 0; i < d.num_items; ++i) {
            if (keep_item[i] && item_freq[i] < std::max<std::size_t>(min_item_freq, 1)) {
                keep_item[i] = false;
                changed = true;
            }
        }
    }
    Dataset out = restrict(d, keep_user, keep_item);
    if (out.num_users == 0 || out.num_items == 0) throw EmptyDatasetError("frequency filter removed all data");
    return out;
}

Split leave_last_out_split(const Dataset& d) {
    if (d.num_users == 0) throw EmptyDatasetError("cannot split an empty dataset");
    Split s;
    s.train = d;
    s.valid_target.assign(d.num_users, kNoItem);
    s.test_target.assign(d.num_users, kNoItem);
    for (std::size_t u = 0; u < d.num_users; ++u) {
        const auto& seq = d.sequences[u];
        if (seq.size() < 3) continue;
        s.valid_target[u] = seq[seq.size() - 2];
        s.test_target[u] = seq[seq.size() - 1];
        s.train.sequences[u].resize(seq.size() - 2);
        s.train.timestamps[u].resize(seq.size() - 2);
        s.eligible_users.push_back(static_cast<UserIndex>(u));
    }
    return s;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    io::Writer w(out);
    w.bytes(kDatasetMagic);
    w.u64(d.num_users);
    w.u64(d.num_items);
    w.u64(d.num_interactions());
    for (auto e : d.users.externals()) w.i64(e);
    for (auto e : d.items.externals()) w.i64(e);
    for (std::size_t u = 0; u < d.num_users; ++u) {
        const auto& seq = d.sequences[u];
        w.varint(seq.size());
        std::int64_t prev = 0;
        for (ItemIndex i : seq) {
            w.zigzag(static_cast<std::int64_t>(i) - prev);
            prev = i;
        }
        std::int64_t prev_t = 0;
        for (auto t : d.timestamps[u]) {
            w.zigzag(t - prev_t);
            prev_t = t;
        }
    }
    if (!out) throw InputError("write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    io::Reader r(in, path.string());
    r.expect_magic(kDatasetMagic);
    Dataset d;
    d.num_users = r.u64();
    d.num_items = r.u64();
    std::uint64_t total = r.u64();
    std::vector<std::int64_t> uext(d.num_users), iext(d.num_items);
    for (auto& e : uext) e = r.i64();
    for (auto& e : iext) e = r.i64();
    d.users = IdMap::from_externals(std::move(uext));
    d.items = IdMap::from_externals(std::move(iext));
    d.sequences.resize(d.num_users);
    d.timestamps.resize(d.num_users);
    std::uint64_t seen = 0;
    for (std::size_t u = 0; u < d.num_users; ++u) {
        std::uint64_t n = r.varint();
        if (n > total) throw InputError(path.string() + ": corrupt sequence length");
        auto& seq = d.sequences[u];
        seq.resize(n);
        std::int64_t prev = 0;
        for (auto& i : seq) {
            prev += r.zigzag();
            i = static_cast<ItemIndex>(prev);
        }
        auto& ts = d.timestamps[u];
        ts.resize(n);
        std::int64_t prev_t = 0;
        for (auto& t : ts) {
            prev_t += r.zigzag();
            t = prev_t;
        }
        seen += n;
    }
    if (seen != total) throw InputError(path.string() + ": interaction count mismatch");
    d.validate();
    return d;
}

void write_movielens(const Dataset& d, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path.string());
    for (std::size_t u = 0; u < d.num_users; ++u)
        for (std::size_t p = 0; p < d.sequences[u].size(); ++p)
            out << d.users.external(static_cast<std::uint32_t>(u)) << "::"
                << d.items.external(d.sequences[u][p]) << "::1::" << d.timestamps[u][p] << '\n';
}

} // namespace ebr
