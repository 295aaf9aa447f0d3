#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "exprbench/data.hpp"
#include "exprbench/preprocess.hpp"
#include "exprbench/trainer.hpp"

namespace exprbench {

// ---------------------------------------------------------------------------
// experiment plan

struct DataRef {
    enum class Kind { csv, dir };
    Kind kind = Kind::csv;
    std::string path;

    bool operator==(const DataRef&) const = default;
};

struct TestRef {
    std::string name;
    DataRef ref;

    bool operator==(const TestRef&) const = default;
};

struct ExperimentPlan {
    std::vector<std::string> architectures;
    std::vector<PrepKind> methods;
    PrepParams prep_params;
    std::vector<DataRef> train_sets;
    std::vector<TestRef> test_sets;
    std::string out_dir = "runs";
    TrainConfig cfg;
    std::string landmarks_file;
    std::string exclude_file;

    bool operator==(const ExperimentPlan& o) const {
        auto pp = [](const PrepParams& a, const PrepParams& b) {
            return a.is_lambda == b.is_lambda &&
                   a.is_iterations == b.is_iterations &&
                   a.dct_discard == b.dct_discard &&
                   a.dog_sigma1 == b.dog_sigma1 &&
                   a.dog_sigma2 == b.dog_sigma2;
        };
        return architectures == o.architectures && methods == o.methods &&
               pp(prep_params, o.prep_params) && train_sets == o.train_sets &&
               test_sets == o.test_sets && out_dir == o.out_dir &&
               cfg == o.cfg && landmarks_file == o.landmarks_file &&
               exclude_file == o.exclude_file;
    }

    void validate() const {
        if (architectures.empty())
            throw std::invalid_argument("plan: no architectures");
        if (methods.empty())
            throw std::invalid_argument("plan: no methods");
        if (train_sets.empty())
            throw std::invalid_argument("plan: no training data");
        if (test_sets.empty())
            throw std::invalid_argument("plan: no test sets");
        if (out_dir.empty())
            throw std::invalid_argument("plan: no output directory");
        cfg.validate();
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t");
    if (b == std::string::npos)
        return "";
    std::size_t e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        item = trim(item);
        if (!item.empty())
            out.push_back(item);
    }
    return out;
}

inline DataRef parse_data_ref(const std::string& s) {
    auto colon = s.find(':');
    if (colon == std::string::npos)
        throw std::invalid_argument("plan: data reference must be csv:<path> "
                                    "or dir:<path>, got " +
                                    s);
    std::string kind = trim(s.substr(0, colon));
    DataRef ref;
    ref.path = trim(s.substr(colon + 1));
    if (kind == "csv")
        ref.kind = DataRef::Kind::csv;
    else if (kind == "dir")
        ref.kind = DataRef::Kind::dir;
    else
        throw std::invalid_argument("plan: unknown data kind " + kind);
    if (ref.path.empty())
        throw std::invalid_argument("plan: empty path in " + s);
    return ref;
}

inline std::string data_ref_string(const DataRef& r) {
    return (r.kind == DataRef::Kind::csv ? std::string("csv:")
                                         : std::string("dir:")) +
           r.path;
}

inline std::string fmt_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

} // namespace detail

// Flat `key = value` text format. `arch`/`method` take comma lists; `train`
// and `test` may repeat, the latter as `<name>:<kind>:<path>`.
inline ExperimentPlan parse_plan(const std::string& text) {
    ExperimentPlan plan;
    plan.architectures.clear();
    plan.methods.clear();
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos)
            line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty())
            continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("plan line " + std::to_string(lineno) +
                                        ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        try {
            if (key == "arch") {
                plan.architectures = detail::split_list(value, ',');
            } else if (key == "method") {
                for (const std::string& m : detail::split_list(value, ','))
                    plan.methods.push_back(parse_prep_kind(m));
            } else if (key == "train") {
                plan.train_sets.push_back(detail::parse_data_ref(value));
            } else if (key == "test") {
                auto colon = value.find(':');
                if (colon == std::string::npos)
                    throw std::invalid_argument(
                        "test entry must be <name>:<kind>:<path>");
                TestRef t;
                t.name = detail::trim(value.substr(0, colon));
                t.ref = detail::parse_data_ref(value.substr(colon + 1));
                plan.test_sets.push_back(std::move(t));
            } else if (key == "out") {
                plan.out_dir = value;
            } else if (key == "epochs") {
                plan.cfg.max_epochs = std::stoi(value);
            } else if (key == "batch") {
                plan.cfg.batch_size = std::stoi(value);
            } else if (key == "lr") {
                plan.cfg.lr = std::stod(value);
            } else if (key == "momentum") {
                plan.cfg.momentum = std::stod(value);
            } else if (key == "weight_decay") {
                plan.cfg.weight_decay = std::stod(value);
            } else if (key == "val_fraction") {
                plan.cfg.val_fraction = std::stod(value);
            } else if (key == "seed") {
                plan.cfg.seed = std::stoull(value);
            } else if (key == "eval") {
                plan.cfg.eval_mode = parse_eval_mode(value);
            } else if (key == "threads") {
                plan.cfg.threads = std::stoi(value);
            } else if (key == "deterministic") {
                plan.cfg.deterministic = value == "true" || value == "1";
            } else if (key == "split_by") {
                if (value == "source")
                    plan.cfg.split_by = SplitBy::source;
                else if (value == "crop")
                    plan.cfg.split_by = SplitBy::crop;
                else
                    throw std::invalid_argument("split_by must be source|crop");
            } else if (key == "landmarks") {
                plan.landmarks_file = value;
            } else if (key == "exclude") {
                plan.exclude_file = value;
            } else if (key == "is_lambda") {
                plan.prep_params.is_lambda = std::stod(value);
            } else if (key == "is_iterations") {
                plan.prep_params.is_iterations = std::stoi(value);
            } else if (key == "dct_discard") {
                plan.prep_params.dct_discard = std::stoi(value);
            } else if (key == "dog_sigma1") {
                plan.prep_params.dog_sigma1 = std::stod(value);
            } else if (key == "dog_sigma2") {
                plan.prep_params.dog_sigma2 = std::stod(value);
            } else {
                throw std::invalid_argument("unknown key " + key);
            }
        } catch (const std::invalid_argument&) {
            throw;
        } catch (const std::exception& e) {
            throw std::invalid_argument("plan line " + std::to_string(lineno) +
                                        ": " + e.what());
        }
    }
    return plan;
}

inline ExperimentPlan parse_plan_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("plan: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_plan(ss.str());
}

inline std::string emit_plan(const ExperimentPlan& plan) {
    std::ostringstream os;
    os << "# exprbench plan\n";
    os << "arch = ";
    for (std::size_t i = 0; i < plan.architectures.size(); ++i)
        os << (i ? ", " : "") << plan.architectures[i];
    os << "\nmethod = ";
    for (std::size_t i = 0; i < plan.methods.size(); ++i)
        os << (i ? ", " : "") << prep_kind_name(plan.methods[i]);
    os << "\n";
    for (const DataRef& r : plan.train_sets)
        os << "train = " << detail::data_ref_string(r) << "\n";
    for (const TestRef& t : plan.test_sets)
        os << "test = " << t.name << ":" << detail::data_ref_string(t.ref)
           << "\n";
    os << "out = " << plan.out_dir << "\n";
    os << "epochs = " << plan.cfg.max_epochs << "\n";
    os << "batch = " << plan.cfg.batch_size << "\n";
    os << "lr = " << detail::fmt_double(plan.cfg.lr) << "\n";
    os << "momentum = " << detail::fmt_double(plan.cfg.momentum) << "\n";
    os << "weight_decay = " << detail::fmt_double(plan.cfg.weight_decay)
       << "\n";
    os << "val_fraction = " << detail::fmt_double(plan.cfg.val_fraction)
       << "\n";
    os << "seed = " << plan.cfg.seed << "\n";
    os << "eval = " << eval_mode_name(plan.cfg.eval_mode) << "\n";
    os << "threads = " << plan.cfg.threads << "\n";
    os << "deterministic = " << (plan.cfg.deterministic ? "true" : "false")
       << "\n";
    os << "split_by = "
       << (plan.cfg.split_by == SplitBy::source ? "source" : "crop") << "\n";
    if (!plan.landmarks_file.empty())
        os << "landmarks = " << plan.landmarks_file << "\n";
    if (!plan.exclude_file.empty())
        os << "exclude = " << plan.exclude_file << "\n";
    os << "is_lambda = " << detail::fmt_double(plan.prep_params.is_lambda)
       << "\n";
    os << "is_iterations = " << plan.prep_params.is_iterations << "\n";
    os << "dct_discard = " << plan.prep_params.dct_discard << "\n";
    os << "dog_sigma1 = " << detail::fmt_double(plan.prep_params.dog_sigma1)
       << "\n";
    os << "dog_sigma2 = " << detail::fmt_double(plan.prep_params.dog_sigma2)
       << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// data staging

// Raw sources for training: FER csv rows tagged Training/PublicTest, or a
// labeled image directory. Test csv references use the PrivateTest rows.
inline Dataset load_source(const DataRef& ref, bool for_training,
                           const std::string& landmarks_file,
                           std::vector<std::string>* errors = nullptr) {
    LoadReport rep;
    if (ref.kind == DataRef::Kind::csv) {
        rep = load_fer_csv(ref.path);
        rep.dataset = for_training
                          ? subset_by_usage(rep.dataset,
                                            {"Training", "PublicTest"})
                          : subset_by_usage(rep.dataset, {"PrivateTest"});
    } else {
        rep = load_image_dir(ref.path, landmarks_file);
    }
    if (errors)
        errors->insert(errors->end(), rep.row_errors.begin(),
                       rep.row_errors.end());
    else if (!rep.row_errors.empty())
        throw std::runtime_error("load " + ref.path + ": " +
                                 rep.row_errors.front() + " (and " +
                                 std::to_string(rep.row_errors.size() - 1) +
                                 " more)");
    return rep.dataset;
}

// register/resize to 48x48 and run the preprocessing method
inline Dataset prepare_canonical(const Dataset& raw, const PrepMethod& m) {
    Dataset out;
    out.name = raw.name;
    out.samples.reserve(raw.samples.size());
    for (const Sample& s : raw.samples) {
        Sample c = s;
        c.image = apply(m, to_canonical48(s));
        c.landmarks.reset();
        out.samples.push_back(std::move(c));
    }
    return out;
}

inline Dataset prepare_train(const Dataset& raw, const PrepMethod& m) {
    return augment_all(prepare_canonical(raw, m));
}

// ---------------------------------------------------------------------------
// report rows

struct ReportRow {
    std::string method;
    std::string architecture;
    std::string test_set;
    double accuracy = 0.0;
    int selected_epoch = 0;

    bool operator==(const ReportRow&) const = default;
};

inline std::string report_csv_line(const ReportRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%s,%s,%.4f,%d", r.method.c_str(),
                  r.architecture.c_str(), r.test_set.c_str(), r.accuracy,
                  r.selected_epoch);
    return std::string(buf);
}

inline void emit_report_csv(const std::vector<ReportRow>& rows,
                            const std::string& path) {
    if (rows.empty())
        throw std::invalid_argument("report: no rows");
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw std::runtime_error("report: cannot write " + path);
    out << "method,architecture,test_set,accuracy,selected_epoch\n";
    for (const ReportRow& r : rows)
        out << report_csv_line(r) << "\n";
    if (!out)
        throw std::runtime_error("report: write failed for " + path);
}

inline std::vector<ReportRow> read_report_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("report: cannot open " + path);
    std::vector<ReportRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line.rfind("method,", 0) == 0)
            continue;
        auto f = detail::split_list(line, ',');
        if (f.size() != 5)
            throw std::runtime_error("report: malformed line: " + line);
        ReportRow r;
        r.method = f[0];
        r.architecture = f[1];
        r.test_set = f[2];
        r.accuracy = std::stod(f[3]);
        r.selected_epoch = std::stoi(f[4]);
        rows.push_back(std::move(r));
    }
    return rows;
}

// Aligned text mirroring the accuracy table: one block per method, one
// column pair per architecture, test sets as rows, a trailing average row
// with the selected epoch. Percent display.
inline std::string format_report_text(const std::vector<ReportRow>& rows) {
    if (rows.empty())
        throw std::invalid_argument("report: no rows");
    std::vector<std::string> methods, archs, tests;
    auto add_unique = [](std::vector<std::string>& v, const std::string& s) {
        if (std::find(v.begin(), v.end(), s) == v.end())
            v.push_back(s);
    };
    for (const ReportRow& r : rows) {
        add_unique(methods, r.method);
        add_unique(archs, r.architecture);
        add_unique(tests, r.test_set);
    }
    auto find_row = [&](const std::string& m, const std::string& a,
                        const std::string& t) -> const ReportRow* {
        for (const ReportRow& r : rows)
            if (r.method == m && r.architecture == a && r.test_set == t)
                return &r;
        return nullptr;
    };
    std::ostringstream os;
    char buf[64];
    os << "Accuracy result (%)\n";
    for (const std::string& m : methods) {
        os << "\n[" << m << "]\n";
        std::snprintf(buf, sizeof(buf), "%-16s", "test set");
        os << buf;
        for (const std::string& a : archs) {
            std::snprintf(buf, sizeof(buf), "%14s", a.c_str());
            os << buf;
        }
        os << "\n";
        for (const std::string& t : tests) {
            std::snprintf(buf, sizeof(buf), "%-16s", t.c_str());
            os << buf;
            for (const std::string& a : archs) {
                const ReportRow* r = find_row(m, a, t);
                if (r)
                    std::snprintf(buf, sizeof(buf), "%14.2f",
                                  100.0 * r->accuracy);
                else
                    std::snprintf(buf, sizeof(buf), "%14s", "-");
                os << buf;
            }
            os << "\n";
        }
        std::snprintf(buf, sizeof(buf), "%-16s", "avg (epoch)");
        os << buf;
        for (const std::string& a : archs) {
            double sum = 0.0;
            int count = 0, epoch = 0;
            for (const std::string& t : tests)
                if (const ReportRow* r = find_row(m, a, t)) {
                    sum += r->accuracy;
                    ++count;
                    epoch = r->selected_epoch;
                }
            if (count) {
                char cell[32];
                std::snprintf(cell, sizeof(cell), "%.2f (%d)",
                              100.0 * sum / count, epoch);
                std::snprintf(buf, sizeof(buf), "%14s", cell);
            } else {
                std::snprintf(buf, sizeof(buf), "%14s", "-");
            }
            os << buf;
        }
        os << "\n";
    }
    return os.str();
}

inline void emit_report_text(const std::vector<ReportRow>& rows,
                             const std::string& path) {
    std::string text = format_report_text(rows);
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw std::runtime_error("report: cannot write " + path);
    out << text;
    if (!out)
        throw std::runtime_error("report: write failed for " + path);
}

// ---------------------------------------------------------------------------
// matrix runner

struct CellStatus {
    std::string method;
    std::string architecture;
    bool ok = false;
    bool reused = false;
    std::string error;
};

struct MatrixResult {
    std::vector<ReportRow> rows;
    std::vector<CellStatus> cells;
};

// Runs every (method, architecture) cell: preprocess+augment the training
// data, train with per-cell checkpoints, evaluate on every test set. Cells
// are isolated under <out>/<method>/<arch>/ and completed cells are reused.
// A failing cell is recorded and does not abort the others.
inline MatrixResult run_matrix(const ExperimentPlan& plan,
                               std::ostream* progress = nullptr) {
    plan.validate();
    namespace fs = std::filesystem;
    fs::create_directories(plan.out_dir);

    auto note = [&](const std::string& msg) {
        if (progress)
            (*progress) << "[bench] " << msg << std::endl;
    };

    // raw sources loaded once
    Dataset raw_train;
    raw_train.name = "train";
    for (const DataRef& ref : plan.train_sets) {
        Dataset part = load_source(ref, true, plan.landmarks_file);
        for (Sample& s : part.samples)
            raw_train.samples.push_back(std::move(s));
    }
    if (!plan.exclude_file.empty())
        raw_train = apply_exclusions(raw_train,
                                     load_exclusion_list(plan.exclude_file));
    if (raw_train.samples.empty())
        throw std::runtime_error("bench: no training samples after loading");
    std::vector<Dataset> raw_tests;
    for (const TestRef& t : plan.test_sets) {
        Dataset d = load_source(t.ref, false, plan.landmarks_file);
        d.name = t.name;
        raw_tests.push_back(std::move(d));
    }

    MatrixResult result;
    for (PrepKind kind : plan.methods) {
        PrepMethod method{kind, plan.prep_params};
        const std::string mname = prep_kind_name(kind);
        std::optional<Dataset> train_crops;
        std::vector<std::optional<Dataset>> test_prepped(raw_tests.size());

        for (const std::string& arch : plan.architectures) {
            CellStatus status;
            status.method = mname;
            status.architecture = arch;
            const std::string cell_dir =
                plan.out_dir + "/" + mname + "/" + arch;
            const std::string cell_report = cell_dir + "/report.csv";
            try {
                if (fs::exists(cell_report)) {
                    std::vector<ReportRow> cached =
                        read_report_csv(cell_report);
                    bool complete = cached.size() == plan.test_sets.size();
                    for (const TestRef& t : plan.test_sets) {
                        bool found = false;
                        for (const ReportRow& r : cached)
                            if (r.test_set == t.name)
                                found = true;
                        complete = complete && found;
                    }
                    if (complete) {
                        note("reusing " + mname + "/" + arch);
                        result.rows.insert(result.rows.end(), cached.begin(),
                                           cached.end());
                        status.ok = true;
                        status.reused = true;
                        result.cells.push_back(status);
                        continue;
                    }
                }
                fs::create_directories(cell_dir);
                if (!train_crops)
                    train_crops = prepare_train(raw_train, method);
                note("training " + mname + "/" + arch + " on " +
                     std::to_string(train_crops->samples.size()) + " crops");
                TrainIO io{cell_dir};
                TrainResult tr = train<float>(*train_crops, builtin(arch),
                                              plan.cfg, &io);
                Network<float> best = network_from_checkpoint<float>(tr.best);
                std::vector<ReportRow> cell_rows;
                for (std::size_t ti = 0; ti < raw_tests.size(); ++ti) {
                    if (!test_prepped[ti])
                        test_prepped[ti] =
                            prepare_canonical(raw_tests[ti], method);
                    EvalResult er =
                        evaluate(best, *test_prepped[ti], plan.cfg.eval_mode,
                                 plan.cfg.threads, plan.cfg.batch_size);
                    ReportRow row;
                    row.method = mname;
                    row.architecture = arch;
                    row.test_set = plan.test_sets[ti].name;
                    row.accuracy = er.accuracy;
                    row.selected_epoch = tr.selected_epoch;
                    cell_rows.push_back(std::move(row));
                }
                emit_report_csv(cell_rows, cell_report);
                note("finished " + mname + "/" + arch + " (epoch " +
                     std::to_string(tr.selected_epoch) + ")");
                result.rows.insert(result.rows.end(), cell_rows.begin(),
                                   cell_rows.end());
                status.ok = true;
            } catch (const std::exception& e) {
                status.error = e.what();
                note("cell " + mname + "/" + arch + " failed: " + e.what());
                try {
                    fs::create_directories(cell_dir);
                    std::ofstream err(cell_dir + "/error.txt");
                    err << e.what() << "\n";
                } catch (...) {
                }
            }
            result.cells.push_back(status);
        }
    }

    if (!result.rows.empty()) {
        emit_report_csv(result.rows, plan.out_dir + "/report.csv");
        emit_report_text(result.rows, plan.out_dir + "/report.txt");
    }
    return result;
}

} // namespace exprbench
