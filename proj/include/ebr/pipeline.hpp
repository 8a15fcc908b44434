#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ebr/common.hpp"
#include "ebr/eval.hpp"
#include "ebr/intent.hpp"
#include "ebr/item2vec.hpp"
#include "ebr/mf.hpp"
#include "ebr/partition.hpp"
#include "ebr/seqrec.hpp"
#include "ebr/synthetic.hpp"

namespace ebr {

class StaleArtifactError : public PipelineError {
public:
    using PipelineError::PipelineError;
};

// key = value text config. Every key has a default; unknown keys are errors.
// Relative paths inside a file resolve against the file's directory.
class PipelineConfig {
public:
    PipelineConfig();

    static PipelineConfig from_file(const std::filesystem::path& path);
    void parse(std::istream& in, const std::string& origin, const std::filesystem::path& base_dir);

    void set(const std::string& key, const std::string& value);
    void apply_override(const std::string& assignment); // "key=value"
    void set_seed(std::uint64_t seed);                    // global and every module seed

    const std::string& get(const std::string& key) const;
    std::size_t count(const std::string& key) const;
    double real(const std::string& key) const;
    std::vector<std::size_t> counts(const std::string& key) const;
    std::vector<double> reals(const std::string& key) const;
    std::vector<std::string> list(const std::string& key) const;

    // Canonical "key=value" lines of every key under `prefix`.
    std::string section(const std::string& prefix) const;
    const std::map<std::string, std::string>& values() const { return values_; }

    // Type and consistency checks; `check_paths` also requires input files.
    void validate(bool check_paths) const;

    std::filesystem::path artifact_dir() const;
    Item2VecConfig item2vec() const;
    KMeansConfig kmeans() const;
    EncoderConfig encoder() const;
    MFConfig mf() const;
    IntentConfig intent() const;
    SyntheticConfig synthetic() const;
    std::vector<std::string> variants() const;
    bool has_variant(const std::string& v) const;

private:
    std::uint64_t seed_of(const std::string& section) const;
    std::map<std::string, std::string> values_;
};

inline const std::vector<std::string> kStages = {"prepare", "item2vec", "cluster", "train", "intent",
                                                 "retrieve", "eval", "report"};

class Pipeline {
public:
    // Takes the artifact directory lock for the lifetime of the object.
    Pipeline(PipelineConfig cfg, bool strict, std::ostream& log);
    ~Pipeline();
    Pipeline(const Pipeline&) = delete;
    Pipeline& operator=(const Pipeline&) = delete;

    std::vector<std::filesystem::path> run_stage(const std::string& stage);
    MetricsReport run_all();

    // Counts of stage outcomes since construction (for tests and logs).
    std::size_t cache_hits() const { return hits_; }
    std::size_t computed() const { return computed_; }

    const PipelineConfig& config() const { return cfg_; }
    std::filesystem::path path(const std::string& artifact) const { return dir_ / artifact; }

private:
    std::vector<std::filesystem::path> prepare();
    std::vector<std::filesystem::path> item2vec();
    std::vector<std::filesystem::path> cluster();
    std::vector<std::filesystem::path> train();
    std::vector<std::filesystem::path> intent();
    std::vector<std::filesystem::path> retrieve();
    std::vector<std::filesystem::path> eval();
    std::vector<std::filesystem::path> report();

    std::string input_fingerprint(const std::string& artifact, const std::string& stage) const;
    bool cached(const std::string& artifact, const std::string& fp);
    void record(const std::string& artifact, const std::string& stage, const std::string& fp, double seconds) const;
    const Split& split();
    const ClusterAssignment& clusters();

    PipelineConfig cfg_;
    bool strict_;
    std::ostream& log_;
    std::filesystem::path dir_;
    std::size_t hits_ = 0, computed_ = 0;
    std::unique_ptr<Split> split_;
    std::unique_ptr<ClusterAssignment> ca_;
};

// Hidden helper behind the CLI's `synth` command: writes a clustered synthetic
// corpus in the MovieLens ratings format.
void write_synthetic_ratings(const SyntheticConfig& cfg, const std::filesystem::path& out);

} // namespace ebr
