#pragma once

#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anonopt/errors.hpp"

namespace anonopt {

// Run transcripts are line-delimited JSON records. Record kinds:
//   header      effective configuration echo (auditable runs)
//   seed_eval   seed candidate scored on the full validation set
//   iteration   one select/propose/gate cycle started
//   proposal    proposer outcome (child id or no-op)
//   gate        minibatch comparison against the parent
//   admit       candidate admitted to the pool (carries scores + pruned ids)
//   stage       stage transition
//   finalize    coverage-completion score for one surviving candidate
//   final       selected candidate and ledger totals
// Records never carry timestamps so reruns are byte-comparable.
class TranscriptWriter {
public:
    TranscriptWriter() = default;

    explicit TranscriptWriter(const std::string& path)
        : file_(std::make_unique<std::ofstream>(path)) {
        if (!*file_) throw DataError("cannot open transcript '" + path + "' for writing");
    }

    void write(const nlohmann::json& record) {
        const std::string line = record.dump();
        lines_.push_back(line);
        if (file_) {
            *file_ << line << "\n";
            file_->flush();
        }
    }

    const std::vector<std::string>& lines() const { return lines_; }

    std::string dump() const {
        std::string out;
        for (const auto& l : lines_) {
            out += l;
            out += "\n";
        }
        return out;
    }

private:
    std::unique_ptr<std::ofstream> file_;
    std::vector<std::string> lines_;
};

inline std::vector<nlohmann::json> parse_transcript(std::istream& in,
                                                    const std::string& path = "<stream>") {
    std::vector<nlohmann::json> records;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            records.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path, lineno, e.what());
        }
    }
    if (records.empty()) throw EmptyTranscript("transcript '" + path + "' has no records");
    return records;
}

inline std::vector<nlohmann::json> load_transcript(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open transcript '" + path + "'");
    return parse_transcript(in, path);
}

} // namespace anonopt
