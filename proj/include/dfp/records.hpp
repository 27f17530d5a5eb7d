#pragma once

// Append-only JSON-lines store of run results, keyed by content digests of
// the canonical spec and of the configuration that produced them.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>

#include <openssl/evp.h>

#include "archspec.hpp"

namespace dfp {

inline constexpr const char* tool_version = "0.1.0";

inline std::string sha256_hex(const std::string& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("SHA-256 digest failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
}

/// Digest of the canonical spec JSON. Object keys are emitted sorted, so the
/// digest does not depend on field order in the source file.
inline std::string spec_hash(const ArchSpec& spec) { return sha256_hex(to_json(spec).dump()); }

inline std::string config_hash(const json& config) { return sha256_hex(config.dump()); }

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct RunRecord {
    std::string spec_id;
    std::string spec_hash;
    std::string config_hash;
    json config;
    json results;
    std::string timestamp;
    std::string version = tool_version;

    json to_json() const {
        return json{{"spec_id", spec_id}, {"spec_hash", spec_hash}, {"config_hash", config_hash},
                    {"config", config},   {"results", results},     {"timestamp", timestamp},
                    {"tool_version", version}};
    }

    static RunRecord from_json(const json& j) {
        RunRecord r;
        r.spec_id = j.at("spec_id").get<std::string>();
        r.spec_hash = j.at("spec_hash").get<std::string>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.config = j.at("config");
        r.results = j.at("results");
        r.timestamp = j.at("timestamp").get<std::string>();
        r.version = j.at("tool_version").get<std::string>();
        return r;
    }

    /// The exact line stored for this record (no trailing newline).
    std::string line() const { return to_json().dump(); }
};

inline RunRecord make_record(const ArchSpec& spec, const json& config, json results) {
    RunRecord r;
    r.spec_id = spec.id;
    r.spec_hash = spec_hash(spec);
    r.config = config;
    r.config_hash = config_hash(config);
    r.results = std::move(results);
    r.timestamp = utc_timestamp();
    return r;
}

class RecordStore {
public:
    using Warn = std::function<void(const std::string&)>;

    explicit RecordStore(std::filesystem::path dir, Warn warn = {}) : dir_(std::move(dir)), warn_(std::move(warn)) {}

    std::filesystem::path file() const { return dir_ / "records.jsonl"; }

    /// Appends one record; concurrent callers are serialized.
    void append(const RunRecord& r) {
        std::lock_guard lock(mu_);
        std::filesystem::create_directories(dir_);
        std::ofstream out(file(), std::ios::app | std::ios::binary);
        if (!out) throw std::runtime_error("cannot append to " + file().string());
        out << r.line() << '\n';
        out.flush();
        if (!out) throw std::runtime_error("write to " + file().string() + " failed");
    }

    /// Newest record with both digests matching. Corrupt lines are skipped.
    std::optional<RunRecord> lookup(const std::string& spec_digest, const std::string& config_digest) const {
        std::lock_guard lock(mu_);
        std::ifstream in(file(), std::ios::binary);
        if (!in) return std::nullopt;
        std::optional<RunRecord> found;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            try {
                auto r = RunRecord::from_json(json::parse(line));
                if (r.spec_hash == spec_digest && r.config_hash == config_digest) found = std::move(r);
            } catch (const std::exception& ex) {
                if (warn_) warn_(file().string() + ":" + std::to_string(lineno) + ": skipping corrupt record (" + ex.what() + ")");
            }
        }
        return found;
    }

private:
    std::filesystem::path dir_;
    Warn warn_;
    mutable std::mutex mu_;
};

inline std::optional<RunRecord> cache_lookup(const RecordStore& store, const std::string& spec_digest,
                                             const std::string& config_digest) {
    return store.lookup(spec_digest, config_digest);
}

} // namespace dfp
