#pragma once

#include <stdexcept>
#include <string>

namespace anonopt {

// Exit-code contract: 0 ok, 2 config, 3 data, 4 backend, 5 budget-degenerate.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    config = 2,
    data = 3,
    backend = 4,
    budget = 5,
};

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg, ExitCode code = ExitCode::failure)
        : std::runtime_error(msg), code_(code) {}
    ExitCode exit_code() const { return code_; }

private:
    ExitCode code_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg, ExitCode::config) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg, ExitCode::data) {}
};

class ParseError : public DataError {
public:
    ParseError(const std::string& path, int line, const std::string& detail)
        : DataError(path + ":" + std::to_string(line) + ": " + detail), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

class SchemaError : public DataError {
public:
    SchemaError(const std::string& id, const std::string& missing_key)
        : DataError("example '" + id + "' is missing required label '" + missing_key + "'"),
          id_(id), missing_key_(missing_key) {}
    const std::string& id() const { return id_; }
    const std::string& missing_key() const { return missing_key_; }

private:
    std::string id_;
    std::string missing_key_;
};

class DuplicateId : public DataError {
public:
    explicit DuplicateId(const std::string& id)
        : DataError("duplicate example id '" + id + "'") {}
};

class TooFewExamples : public DataError {
public:
    explicit TooFewExamples(const std::string& msg) : DataError(msg) {}
};

class BackendError : public Error {
public:
    explicit BackendError(const std::string& msg) : Error(msg, ExitCode::backend) {}
};

class BackendUnavailable : public BackendError {
public:
    explicit BackendUnavailable(const std::string& msg) : BackendError(msg) {}
};

class MalformedResponse : public BackendError {
public:
    explicit MalformedResponse(const std::string& msg) : BackendError(msg) {}
};

class AmbiguousScript : public BackendError {
public:
    explicit AmbiguousScript(const std::string& msg) : BackendError(msg) {}
};

// Judge output could not be parsed even after the structured reprompt.
// Metric code maps this to a pessimistic score; it only escapes to callers
// through findings, never as a thrown error from a metric entry point.
class JudgeParseError : public BackendError {
public:
    explicit JudgeParseError(const std::string& msg) : BackendError(msg) {}
};

class BudgetExhausted : public Error {
public:
    explicit BudgetExhausted(const std::string& msg) : Error(msg, ExitCode::budget) {}
};

class EmptyTranscript : public DataError {
public:
    explicit EmptyTranscript(const std::string& msg) : DataError(msg) {}
};

} // namespace anonopt
