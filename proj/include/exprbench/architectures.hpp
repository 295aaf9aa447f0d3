#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "exprbench/layers.hpp"

namespace exprbench {

enum class LayerKind { conv, fc, relu, dropout, maxp, avgp, stochp, lrn, out };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::fc: return "fc";
    case LayerKind::relu: return "relu";
    case LayerKind::dropout: return "dropout";
    case LayerKind::maxp: return "maxp";
    case LayerKind::avgp: return "avgp";
    case LayerKind::stochp: return "stochp";
    case LayerKind::lrn: return "lrn";
    case LayerKind::out: return "out";
    }
    return "?";
}

// One declarative layer. Only the fields its kind uses are meaningful.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int kh = 0, kw = 0, stride = 1, pad = 0; // conv / pooling
    bool pad_top_left_only = false;          // Table 3 asterisk padding
    int units = 0;                           // conv out channels, fc/out units
    double rate = 0.0;                       // dropout
    LrnParams lrn;                           // lrn

    PadSpec pad_spec() const {
        return pad_top_left_only ? PadSpec::top_left(pad)
                                 : PadSpec::symmetric(pad);
    }

    bool operator==(const LayerSpec& o) const {
        if (kind != o.kind)
            return false;
        switch (kind) {
        case LayerKind::conv:
            return kh == o.kh && kw == o.kw && stride == o.stride &&
                   pad == o.pad && pad_top_left_only == o.pad_top_left_only &&
                   units == o.units;
        case LayerKind::maxp:
        case LayerKind::avgp:
        case LayerKind::stochp:
            return kh == o.kh && kw == o.kw && stride == o.stride &&
                   pad == o.pad && pad_top_left_only == o.pad_top_left_only;
        case LayerKind::fc:
        case LayerKind::out:
            return units == o.units;
        case LayerKind::dropout:
            return rate == o.rate;
        case LayerKind::lrn:
            return lrn.n == o.lrn.n && lrn.alpha == o.lrn.alpha &&
                   lrn.beta == o.lrn.beta && lrn.k == o.lrn.k;
        case LayerKind::relu:
            return true;
        }
        return false;
    }
};

struct ArchitectureSpec {
    std::string name;
    int in_channels = 1, in_h = 42, in_w = 42;
    int classes = 7;
    std::vector<LayerSpec> layers;

    bool operator==(const ArchitectureSpec& o) const {
        return name == o.name && in_channels == o.in_channels &&
               in_h == o.in_h && in_w == o.in_w && classes == o.classes &&
               layers == o.layers;
    }
};

// ---------------------------------------------------------------------------
// the four Table 3 networks
//
// Every conv and fc block carries ReLU + dropout (0.25 after conv blocks,
// 0.5 after fc blocks); the classifier head does not.

namespace detail {
struct ArchBuilder {
    ArchitectureSpec spec;

    ArchBuilder& conv(int k, int s, int p, int c, bool ast = false) {
        LayerSpec l;
        l.kind = LayerKind::conv;
        l.kh = l.kw = k;
        l.stride = s;
        l.pad = p;
        l.pad_top_left_only = ast;
        l.units = c;
        spec.layers.push_back(l);
        relu();
        dropout(0.25);
        return *this;
    }
    ArchBuilder& pool(LayerKind kind, int k, int s, int p, bool ast = false) {
        LayerSpec l;
        l.kind = kind;
        l.kh = l.kw = k;
        l.stride = s;
        l.pad = p;
        l.pad_top_left_only = ast;
        spec.layers.push_back(l);
        return *this;
    }
    ArchBuilder& lrn() {
        LayerSpec l;
        l.kind = LayerKind::lrn;
        spec.layers.push_back(l);
        return *this;
    }
    ArchBuilder& fc(int n) {
        LayerSpec l;
        l.kind = LayerKind::fc;
        l.units = n;
        spec.layers.push_back(l);
        relu();
        dropout(0.5);
        return *this;
    }
    ArchBuilder& out(int n) {
        LayerSpec l;
        l.kind = LayerKind::out;
        l.units = n;
        spec.layers.push_back(l);
        return *this;
    }
    ArchBuilder& relu() {
        LayerSpec l;
        l.kind = LayerKind::relu;
        spec.layers.push_back(l);
        return *this;
    }
    ArchBuilder& dropout(double rate) {
        LayerSpec l;
        l.kind = LayerKind::dropout;
        l.rate = rate;
        spec.layers.push_back(l);
        return *this;
    }
};
} // namespace detail

inline const std::vector<std::string>& builtin_names() {
    static const std::vector<std::string> names = {"tang", "yu", "kahou",
                                                   "imagenet"};
    return names;
}

inline ArchitectureSpec builtin(const std::string& name) {
    detail::ArchBuilder b;
    b.spec.name = name;
    if (name == "tang") {
        b.conv(5, 1, 2, 32)
            .pool(LayerKind::maxp, 3, 2, 1)
            .conv(4, 1, 1, 32)
            .pool(LayerKind::maxp, 3, 2, 1)
            .conv(5, 1, 2, 32)
            .pool(LayerKind::maxp, 3, 2, 1, true)
            .fc(3072)
            .out(7);
    } else if (name == "yu") {
        b.conv(5, 1, 2, 48)
            .pool(LayerKind::stochp, 3, 2, 1)
            .conv(3, 1, 1, 48)
            .conv(3, 1, 1, 64)
            .pool(LayerKind::stochp, 3, 2, 1)
            .conv(3, 1, 1, 128)
            .conv(3, 1, 1, 128)
            .pool(LayerKind::stochp, 3, 2, 0)
            .fc(1024)
            .fc(1024)
            .out(7);
    } else if (name == "kahou") {
        b.conv(5, 1, 2, 64)
            .pool(LayerKind::maxp, 3, 2, 0)
            .lrn()
            .conv(3, 1, 1, 64)
            .pool(LayerKind::avgp, 3, 2, 1)
            .lrn()
            .conv(3, 1, 1, 128)
            .pool(LayerKind::avgp, 3, 2, 1, true)
            .fc(3072)
            .out(7);
    } else if (name == "imagenet") {
        b.conv(5, 1, 2, 32)
            .pool(LayerKind::maxp, 3, 2, 0)
            .lrn()
            .conv(3, 1, 1, 96)
            .pool(LayerKind::maxp, 3, 2, 1)
            .lrn()
            .conv(3, 1, 1, 128)
            .conv(3, 1, 1, 128)
            .conv(3, 1, 1, 96)
            .pool(LayerKind::maxp, 3, 2, 1, true)
            .conv(5, 1, 0, 1024)
            .fc(1024)
            .out(7);
    } else {
        throw std::invalid_argument("unknown architecture: " + name);
    }
    return b.spec;
}

// ---------------------------------------------------------------------------
// shape inference: floor-rounded conv/pool arithmetic, fc layers flatten

inline std::vector<std::array<int, 3>>
infer_shapes(const ArchitectureSpec& spec) {
    std::vector<std::array<int, 3>> shapes;
    shapes.reserve(spec.layers.size());
    int c = spec.in_channels, h = spec.in_h, w = spec.in_w;
    for (const LayerSpec& l : spec.layers) {
        switch (l.kind) {
        case LayerKind::conv: {
            PadSpec p = l.pad_spec();
            h = out_extent(h, l.kh, p.top, p.bottom, l.stride, "conv");
            w = out_extent(w, l.kw, p.left, p.right, l.stride, "conv");
            c = l.units;
            break;
        }
        case LayerKind::maxp:
        case LayerKind::avgp:
        case LayerKind::stochp: {
            PadSpec p = l.pad_spec();
            h = out_extent(h, l.kh, p.top, p.bottom, l.stride,
                           layer_kind_name(l.kind));
            w = out_extent(w, l.kw, p.left, p.right, l.stride,
                           layer_kind_name(l.kind));
            break;
        }
        case LayerKind::fc:
        case LayerKind::out:
            c = l.units;
            h = w = 1;
            break;
        case LayerKind::relu:
        case LayerKind::dropout:
        case LayerKind::lrn:
            break;
        }
        shapes.push_back({c, h, w});
    }
    if (spec.layers.empty() || spec.layers.back().kind != LayerKind::out)
        throw std::invalid_argument("architecture must end with an out layer");
    if (shapes.back()[0] != spec.classes)
        throw std::invalid_argument("final layer units != class count");
    return shapes;
}

// Sizes along the Table-3-level rows: input spatial extent, output extent of
// each conv/pool/lrn layer, then fc/out unit counts. ReLU and dropout
// attachments are skipped.
inline std::vector<int> spatial_trace(const ArchitectureSpec& spec) {
    auto shapes = infer_shapes(spec);
    std::vector<int> trace;
    trace.push_back(spec.in_h);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        switch (spec.layers[i].kind) {
        case LayerKind::conv:
        case LayerKind::maxp:
        case LayerKind::avgp:
        case LayerKind::stochp:
        case LayerKind::lrn:
            trace.push_back(shapes[i][1]);
            break;
        case LayerKind::fc:
        case LayerKind::out:
            trace.push_back(shapes[i][0]);
            break;
        case LayerKind::relu:
        case LayerKind::dropout:
            break;
        }
    }
    return trace;
}

inline std::int64_t parameter_count(const ArchitectureSpec& spec) {
    std::int64_t total = 0;
    int c = spec.in_channels, h = spec.in_h, w = spec.in_w;
    auto shapes = infer_shapes(spec);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        if (l.kind == LayerKind::conv) {
            total += static_cast<std::int64_t>(l.units) * c * l.kh * l.kw +
                     l.units;
        } else if (l.kind == LayerKind::fc || l.kind == LayerKind::out) {
            total += static_cast<std::int64_t>(l.units) * c * h * w + l.units;
        }
        c = shapes[i][0];
        h = shapes[i][1];
        w = shapes[i][2];
    }
    return total;
}

// ---------------------------------------------------------------------------
// textual architecture format, one layer per line:
//
//   input 1x42x42
//   classes 7
//   conv 5x5 s1 p2 c32
//   relu
//   dropout 0.25
//   maxp 3x3 s2 p1*
//   lrn n5 a0.0001 b0.75 k1
//   fc 3072
//   out 7
//
// '#' starts a comment. The asterisk suffix pads top/left only.

inline std::string format_spec(const ArchitectureSpec& spec) {
    std::ostringstream os;
    os << "# architecture " << spec.name << "\n";
    os << "input " << spec.in_channels << "x" << spec.in_h << "x" << spec.in_w
       << "\n";
    os << "classes " << spec.classes << "\n";
    for (const LayerSpec& l : spec.layers) {
        switch (l.kind) {
        case LayerKind::conv:
            os << "conv " << l.kh << "x" << l.kw << " s" << l.stride << " p"
               << l.pad << (l.pad_top_left_only ? "*" : "") << " c" << l.units
               << "\n";
            break;
        case LayerKind::maxp:
        case LayerKind::avgp:
        case LayerKind::stochp:
            os << layer_kind_name(l.kind) << " " << l.kh << "x" << l.kw << " s"
               << l.stride << " p" << l.pad << (l.pad_top_left_only ? "*" : "")
               << "\n";
            break;
        case LayerKind::lrn:
            os << "lrn n" << l.lrn.n << " a" << l.lrn.alpha << " b"
               << l.lrn.beta << " k" << l.lrn.k << "\n";
            break;
        case LayerKind::relu:
            os << "relu\n";
            break;
        case LayerKind::dropout:
            os << "dropout " << l.rate << "\n";
            break;
        case LayerKind::fc:
            os << "fc " << l.units << "\n";
            break;
        case LayerKind::out:
            os << "out " << l.units << "\n";
            break;
        }
    }
    return os.str();
}

namespace detail {
inline int parse_int_field(const std::string& tok, char prefix,
                           bool* asterisk = nullptr) {
    if (tok.empty() || tok[0] != prefix)
        throw std::invalid_argument(std::string("architecture: expected ") +
                                    prefix + "<int>, got " + tok);
    std::string body = tok.substr(1);
    if (asterisk) {
        *asterisk = !body.empty() && body.back() == '*';
        if (*asterisk)
            body.pop_back();
    }
    try {
        return std::stoi(body);
    } catch (const std::exception&) {
        throw std::invalid_argument("architecture: bad integer in " + tok);
    }
}

inline double parse_double_field(const std::string& tok, char prefix) {
    if (tok.empty() || tok[0] != prefix)
        throw std::invalid_argument(std::string("architecture: expected ") +
                                    prefix + "<real>, got " + tok);
    try {
        return std::stod(tok.substr(1));
    } catch (const std::exception&) {
        throw std::invalid_argument("architecture: bad number in " + tok);
    }
}

inline std::array<int, 2> parse_kxk(const std::string& tok) {
    auto x = tok.find('x');
    if (x == std::string::npos)
        throw std::invalid_argument("architecture: expected KxK, got " + tok);
    try {
        return {std::stoi(tok.substr(0, x)), std::stoi(tok.substr(x + 1))};
    } catch (const std::exception&) {
        throw std::invalid_argument("architecture: bad kernel " + tok);
    }
}
} // namespace detail

inline ArchitectureSpec parse_spec(const std::string& text,
                                   const std::string& name = "custom") {
    ArchitectureSpec spec;
    spec.name = name;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos)
            line = line.substr(0, hash);
        std::istringstream ls(line);
        std::vector<std::string> tok;
        std::string t;
        while (ls >> t)
            tok.push_back(t);
        if (tok.empty())
            continue;
        const std::string& head = tok[0];
        auto need = [&](std::size_t n) {
            if (tok.size() != n)
                throw std::invalid_argument("architecture: bad arity in line: " +
                                            line);
        };
        if (head == "input") {
            need(2);
            auto a = tok[1].find('x');
            auto b = tok[1].rfind('x');
            if (a == std::string::npos || b == a)
                throw std::invalid_argument("architecture: bad input line: " +
                                            line);
            spec.in_channels = std::stoi(tok[1].substr(0, a));
            spec.in_h = std::stoi(tok[1].substr(a + 1, b - a - 1));
            spec.in_w = std::stoi(tok[1].substr(b + 1));
        } else if (head == "classes") {
            need(2);
            spec.classes = std::stoi(tok[1]);
        } else if (head == "conv") {
            need(5);
            LayerSpec l;
            l.kind = LayerKind::conv;
            auto k = detail::parse_kxk(tok[1]);
            l.kh = k[0];
            l.kw = k[1];
            l.stride = detail::parse_int_field(tok[2], 's');
            l.pad = detail::parse_int_field(tok[3], 'p', &l.pad_top_left_only);
            l.units = detail::parse_int_field(tok[4], 'c');
            spec.layers.push_back(l);
        } else if (head == "maxp" || head == "avgp" || head == "stochp") {
            need(4);
            LayerSpec l;
            l.kind = head == "maxp"   ? LayerKind::maxp
                     : head == "avgp" ? LayerKind::avgp
                                      : LayerKind::stochp;
            auto k = detail::parse_kxk(tok[1]);
            l.kh = k[0];
            l.kw = k[1];
            l.stride = detail::parse_int_field(tok[2], 's');
            l.pad = detail::parse_int_field(tok[3], 'p', &l.pad_top_left_only);
            spec.layers.push_back(l);
        } else if (head == "lrn") {
            LayerSpec l;
            l.kind = LayerKind::lrn;
            if (tok.size() == 5) {
                l.lrn.n = detail::parse_int_field(tok[1], 'n');
                l.lrn.alpha = detail::parse_double_field(tok[2], 'a');
                l.lrn.beta = detail::parse_double_field(tok[3], 'b');
                l.lrn.k = detail::parse_double_field(tok[4], 'k');
            } else if (tok.size() != 1) {
                throw std::invalid_argument("architecture: bad lrn line: " +
                                            line);
            }
            spec.layers.push_back(l);
        } else if (head == "relu") {
            need(1);
            LayerSpec l;
            l.kind = LayerKind::relu;
            spec.layers.push_back(l);
        } else if (head == "dropout") {
            need(2);
            LayerSpec l;
            l.kind = LayerKind::dropout;
            l.rate = std::stod(tok[1]);
            spec.layers.push_back(l);
        } else if (head == "fc" || head == "out") {
            need(2);
            LayerSpec l;
            l.kind = head == "fc" ? LayerKind::fc : LayerKind::out;
            l.units = std::stoi(tok[1]);
            spec.layers.push_back(l);
        } else {
            throw std::invalid_argument("architecture: unknown layer: " + head);
        }
    }
    infer_shapes(spec); // validate end to end
    return spec;
}

// ---------------------------------------------------------------------------
// Table 3 cells whose printed maps disagree with the kernel-row arithmetic.
// The kernel row and conv channel counts are authoritative; spatial sizes are
// derived with floor rounding.

struct Table3Deviation {
    std::string network;
    int layer = 0;
    std::string printed;
    std::string computed;
    std::string note;

    bool operator==(const Table3Deviation&) const = default;
};

inline const std::vector<Table3Deviation>& table3_deviations() {
    static const std::vector<Table3Deviation> devs = {
        {"tang", 5, "42@32", "10@32",
         "printed size repeats layer 1; 5x5(1,2) on 10 keeps 10"},
        {"yu", 4, "11@64", "21@64 at layer 4",
         "maps row shifted by one from layer 4 on; conv channels read as "
         "48,48,64,128,128"},
        {"kahou", 2, "21@64", "20@64",
         "floor((42-3)/2)+1 = 20; the printed 21 is the lone ceil-consistent "
         "cell"},
        {"kahou", 4, "20@64", "20@64",
         "printed value contradicts the table's own layer 3 (21): 3x3(1,1) "
         "preserves size; floor arithmetic reaches 20 consistently"},
    };
    return devs;
}

} // namespace exprbench
