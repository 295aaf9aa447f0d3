// exprbench: facial-expression CNN benchmark pipeline.
//
// Subcommands: prep, train, eval, bench, inspect. Exit codes: 0 success,
// 1 runtime failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "exprbench/bench.hpp"
#include "exprbench/network.hpp"
#include "exprbench/trainer.hpp"

namespace fs = std::filesystem;
using namespace exprbench;

namespace {

struct PrepOpts {
    std::string method = "raw";
    std::string in_dir;
    std::string out_dir;
    PrepParams params;
};

struct TrainOpts {
    std::string arch = "tang";
    std::string spec_file;
    std::string data;
    std::string out_dir = "run";
    std::string method = "raw";
    std::string landmarks;
    std::string exclude;
    PrepParams prep_params;
    TrainConfig cfg;
    std::string eval_mode = "ten_crop_mean";
    std::string split_by = "source";
};

struct EvalOpts {
    std::string ckpt;
    std::string data;
    std::string method = "raw";
    std::string mode = "ten_crop_mean";
    std::string landmarks;
    PrepParams prep_params;
    int threads = 1;
};

struct InspectOpts {
    std::string arch;
    std::string spec_file;
    bool deviations = false;
};

ArchitectureSpec resolve_arch(const std::string& name,
                              const std::string& spec_file) {
    if (!spec_file.empty()) {
        std::ifstream in(spec_file);
        if (!in)
            throw std::runtime_error("cannot open spec file " + spec_file);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse_spec(ss.str(), fs::path(spec_file).stem().string());
    }
    return builtin(name);
}

Dataset load_cli_data(const std::string& ref_str, bool for_training,
                      const std::string& landmarks,
                      const std::string& exclude) {
    DataRef ref = detail::parse_data_ref(ref_str);
    std::vector<std::string> errors;
    Dataset ds = load_source(ref, for_training, landmarks, &errors);
    for (const std::string& e : errors)
        std::cerr << "warning: " << e << "\n";
    if (!exclude.empty())
        ds = apply_exclusions(ds, load_exclusion_list(exclude));
    return ds;
}

int run_prep(const PrepOpts& o) {
    PrepMethod method{parse_prep_kind(o.method), o.params};
    if (!fs::is_directory(o.in_dir))
        throw std::runtime_error("prep: not a directory: " + o.in_dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(o.in_dir))
        if (e.is_regular_file() && e.path().extension() == ".pgm")
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw std::runtime_error("prep: no .pgm files under " + o.in_dir);
    for (const fs::path& f : files) {
        GrayImage img = read_pgm(f.string());
        GrayImage out = apply(method, img);
        fs::path rel = fs::relative(f, o.in_dir);
        fs::path dst = fs::path(o.out_dir) / rel;
        fs::create_directories(dst.parent_path());
        write_pgm(out, dst.string());
    }
    std::cout << "processed " << files.size() << " images -> " << o.out_dir
              << "\n";
    return 0;
}

int run_train(const TrainOpts& o) {
    TrainConfig cfg = o.cfg;
    cfg.eval_mode = parse_eval_mode(o.eval_mode);
    cfg.split_by = o.split_by == "crop" ? SplitBy::crop : SplitBy::source;
    ArchitectureSpec spec = resolve_arch(o.arch, o.spec_file);
    PrepMethod method{parse_prep_kind(o.method), o.prep_params};

    Dataset raw = load_cli_data(o.data, true, o.landmarks, o.exclude);
    if (raw.samples.empty())
        throw std::runtime_error("train: no samples loaded");
    Dataset crops = prepare_train(raw, method);
    std::cerr << "training " << spec.name << " on " << crops.samples.size()
              << " crops (" << raw.samples.size() << " sources)\n";
    TrainIO io{o.out_dir};
    TrainResult res = train<float>(
        crops, spec, cfg, &io,
        [](const Network<float>&, const EpochRecord& r) {
            std::fprintf(stderr, "epoch %d: train_loss %.4f val_acc %.4f\n",
                         r.epoch, r.train_loss, r.val_accuracy);
            return true;
        });
    std::cout << "selected epoch " << res.selected_epoch << " (val_acc "
              << res.best_val << ")\n";
    std::cout << "checkpoints in " << o.out_dir << "/checkpoints\n";
    return 0;
}

int run_eval(const EvalOpts& o) {
    Checkpoint ckpt = load_checkpoint(o.ckpt);
    PrepMethod method{parse_prep_kind(o.method), o.prep_params};
    Dataset raw = load_cli_data(o.data, false, o.landmarks, "");
    Dataset prepped = prepare_canonical(raw, method);
    Network<float> net = network_from_checkpoint<float>(ckpt);
    EvalResult res = evaluate(net, prepped, parse_eval_mode(o.mode), o.threads);
    std::printf("accuracy %.4f over %lld sources\n", res.accuracy,
                static_cast<long long>(res.total));
    std::printf("confusion (rows = true class):\n%9s", "");
    for (const std::string& c : class_names())
        std::printf("%9s", c.c_str());
    std::printf("\n");
    for (int i = 0; i < 7; ++i) {
        std::printf("%9s", class_names()[static_cast<std::size_t>(i)].c_str());
        for (int j = 0; j < 7; ++j)
            std::printf("%9lld",
                        static_cast<long long>(
                            res.confusion[static_cast<std::size_t>(i)]
                                         [static_cast<std::size_t>(j)]));
        std::printf("\n");
    }
    return 0;
}

int run_inspect(const InspectOpts& o) {
    if (o.deviations) {
        nlohmann::json arr = nlohmann::json::array();
        for (const Table3Deviation& d : table3_deviations()) {
            arr.push_back({{"network", d.network},
                           {"layer", d.layer},
                           {"printed", d.printed},
                           {"computed", d.computed},
                           {"note", d.note}});
        }
        std::cout << arr.dump(2) << "\n";
        return 0;
    }
    ArchitectureSpec spec = resolve_arch(o.arch, o.spec_file);
    auto shapes = infer_shapes(spec);
    std::printf("%s: input %dx%dx%d\n", spec.name.c_str(), spec.in_channels,
                spec.in_h, spec.in_w);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        std::string desc = layer_kind_name(l.kind);
        switch (l.kind) {
        case LayerKind::conv:
            desc += " " + std::to_string(l.kh) + "x" + std::to_string(l.kw) +
                    " s" + std::to_string(l.stride) + " p" +
                    std::to_string(l.pad) + (l.pad_top_left_only ? "*" : "") +
                    " c" + std::to_string(l.units);
            break;
        case LayerKind::maxp:
        case LayerKind::avgp:
        case LayerKind::stochp:
            desc += " " + std::to_string(l.kh) + "x" + std::to_string(l.kw) +
                    " s" + std::to_string(l.stride) + " p" +
                    std::to_string(l.pad) + (l.pad_top_left_only ? "*" : "");
            break;
        case LayerKind::fc:
        case LayerKind::out:
            desc += " " + std::to_string(l.units);
            break;
        case LayerKind::dropout:
            desc += " " + std::to_string(l.rate);
            break;
        default:
            break;
        }
        std::printf("  %2zu  %-24s -> %d x %d x %d\n", i + 1, desc.c_str(),
                    shapes[i][0], shapes[i][1], shapes[i][2]);
    }
    std::vector<int> trace = spatial_trace(spec);
    std::string trace_str;
    for (std::size_t i = 0; i < trace.size(); ++i)
        trace_str += (i ? " -> " : "") + std::to_string(trace[i]);
    std::printf("trace: %s\n", trace_str.c_str());
    std::printf("parameters: %lld\n",
                static_cast<long long>(parameter_count(spec)));
    return 0;
}

int run_bench(const std::string& plan_path) {
    ExperimentPlan plan = parse_plan_file(plan_path);
    MatrixResult res = run_matrix(plan, &std::cerr);
    int failures = 0;
    for (const CellStatus& c : res.cells)
        if (!c.ok) {
            ++failures;
            std::cerr << "FAILED cell " << c.method << "/" << c.architecture
                      << ": " << c.error << "\n";
        }
    if (!res.rows.empty()) {
        std::cout << format_report_text(res.rows);
        std::cout << "\nreport: " << plan.out_dir << "/report.csv\n";
    }
    if (failures)
        throw std::runtime_error(std::to_string(failures) + " cell(s) failed");
    return 0;
}

void add_prep_param_flags(CLI::App* cmd, PrepParams& p) {
    cmd->add_option("--is-lambda", p.is_lambda,
                    "isotropic smoothing step weight");
    cmd->add_option("--is-iters", p.is_iterations,
                    "isotropic smoothing iterations");
    cmd->add_option("--dct-discard", p.dct_discard,
                    "zigzag coefficients discarded (incl. DC)");
    cmd->add_option("--dog-sigma1", p.dog_sigma1, "DoG narrow sigma");
    cmd->add_option("--dog-sigma2", p.dog_sigma2, "DoG wide sigma");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"facial-expression CNN benchmark"};
    app.require_subcommand(1);

    PrepOpts prep;
    CLI::App* prep_cmd =
        app.add_subcommand("prep", "preprocess a directory of PGM images");
    prep_cmd->add_option("--method", prep.method, "raw|histeq|is|dct|dog")
        ->required();
    prep_cmd->add_option("--in", prep.in_dir, "input directory")->required();
    prep_cmd->add_option("--out", prep.out_dir, "output directory")->required();
    add_prep_param_flags(prep_cmd, prep.params);

    TrainOpts tr;
    CLI::App* train_cmd = app.add_subcommand("train", "train one model");
    train_cmd->add_option("--arch", tr.arch, "tang|yu|kahou|imagenet");
    train_cmd->add_option("--spec", tr.spec_file, "architecture spec file");
    train_cmd->add_option("--data", tr.data, "csv:<path> or dir:<path>")
        ->required();
    train_cmd->add_option("--out", tr.out_dir, "output directory");
    train_cmd->add_option("--method", tr.method, "preprocessing method");
    train_cmd->add_option("--landmarks", tr.landmarks, "landmark sidecar csv");
    train_cmd->add_option("--exclude", tr.exclude, "exclusion list file");
    train_cmd->add_option("--epochs", tr.cfg.max_epochs, "epoch budget");
    train_cmd->add_option("--batch", tr.cfg.batch_size, "batch size");
    train_cmd->add_option("--lr", tr.cfg.lr, "learning rate");
    train_cmd->add_option("--momentum", tr.cfg.momentum, "momentum");
    train_cmd->add_option("--weight-decay", tr.cfg.weight_decay, "weight decay");
    train_cmd->add_option("--val-fraction", tr.cfg.val_fraction,
                          "validation fraction");
    train_cmd->add_option("--seed", tr.cfg.seed, "rng seed");
    train_cmd->add_option("--threads", tr.cfg.threads, "worker threads");
    train_cmd->add_flag("--deterministic", tr.cfg.deterministic,
                        "single-threaded bit-stable run");
    train_cmd->add_option("--eval-mode", tr.eval_mode,
                          "center_crop|ten_crop_mean");
    train_cmd->add_option("--split-by", tr.split_by, "source|crop");
    add_prep_param_flags(train_cmd, tr.prep_params);

    EvalOpts ev;
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--ckpt", ev.ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--data", ev.data, "csv:<path> or dir:<path>")
        ->required();
    eval_cmd->add_option("--method", ev.method, "preprocessing method");
    eval_cmd->add_option("--mode", ev.mode, "center_crop|ten_crop_mean");
    eval_cmd->add_option("--landmarks", ev.landmarks, "landmark sidecar csv");
    eval_cmd->add_option("--threads", ev.threads, "worker threads");
    add_prep_param_flags(eval_cmd, ev.prep_params);

    std::string plan_path;
    CLI::App* bench_cmd =
        app.add_subcommand("bench", "run the experiment matrix");
    bench_cmd->add_option("--plan", plan_path, "plan file")->required();

    InspectOpts ins;
    CLI::App* inspect_cmd =
        app.add_subcommand("inspect", "print shape trace and parameter count");
    inspect_cmd->add_option("arch", ins.arch, "architecture name");
    inspect_cmd->add_option("--spec", ins.spec_file, "architecture spec file");
    inspect_cmd->add_flag("--deviations", ins.deviations,
                          "print the known Table 3 deviations as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (prep_cmd->parsed())
            return run_prep(prep);
        if (train_cmd->parsed())
            return run_train(tr);
        if (eval_cmd->parsed())
            return run_eval(ev);
        if (bench_cmd->parsed())
            return run_bench(plan_path);
        if (inspect_cmd->parsed()) {
            if (ins.arch.empty() && ins.spec_file.empty() && !ins.deviations) {
                std::cerr << "inspect: an architecture name, --spec, or "
                             "--deviations is required\n";
                return 2;
            }
            return run_inspect(ins);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
