#pragma once

#include "nrreg/error.hpp"
#include "nrreg/geometry.hpp"

#include <bit>
#include <cctype>
#include <cstdlib>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace nrreg {

enum class MeshFormat { obj, ply };
enum class PlyEncoding { ascii, binary_little_endian };

namespace detail {

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Splits on whitespace; views point into `line`.
inline std::vector<std::string_view> tokenize(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (pos < line.size()) {
        while (pos < line.size() && std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
        const std::size_t start = pos;
        while (pos < line.size() && !std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
        if (pos > start) out.push_back(line.substr(start, pos - start));
    }
    return out;
}

inline bool parse_double(std::string_view tok, double& out) {
    // strtod handles the inf/nan/hex spellings from_chars rejects on some libstdc++ builds.
    std::string s(tok);
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size() && !s.empty();
}

inline bool parse_long(std::string_view tok, long& out) {
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
    return ec == std::errc() && p == tok.data() + tok.size();
}

/// Iterates lines, tracking 1-based numbers; strips a trailing '\r'.
class LineReader {
public:
    explicit LineReader(std::string_view text, std::size_t offset = 0) : text_(text), pos_(offset) {}

    bool next(std::string_view& line) {
        if (pos_ >= text_.size()) return false;
        std::size_t end = text_.find('\n', pos_);
        const bool had_newline = end != std::string_view::npos;
        if (!had_newline) end = text_.size();
        line = text_.substr(pos_, end - pos_);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        pos_ = had_newline ? end + 1 : end;
        last_had_newline_ = had_newline;
        ++number_;
        return true;
    }

    std::size_t number() const { return number_; }
    std::size_t offset() const { return pos_; }
    bool last_had_newline() const { return last_had_newline_; }

private:
    std::string_view text_;
    std::size_t pos_;
    std::size_t number_ = 0;
    bool last_had_newline_ = true;
};

inline void finalize_loaded(Shape& shape, const std::string& path) {
    if (shape.size() == 0) throw ParseError(path, 0, "no vertices");
    for (const Face& f : shape.faces)
        for (int v : f)
            if (v < 0 || v >= shape.size())
                throw ParseError(path, 0, "face references vertex " + std::to_string(v) +
                                              " outside [0, " + std::to_string(shape.size()) + ")");
    if (shape.has_faces()) shape.edges = mesh_edges(shape.faces, shape.size());
}

inline Shape load_obj(const std::string& path) {
    const std::string text = read_file_bytes(path);
    std::vector<Eigen::Vector3d> verts;
    Shape shape;
    LineReader reader(text);
    std::string_view line;
    while (reader.next(line)) {
        const auto tok = tokenize(line);
        if (tok.empty() || tok[0][0] == '#') continue;
        if (tok[0] == "v") {
            Eigen::Vector3d p;
            if (tok.size() < 4 || !parse_double(tok[1], p.x()) || !parse_double(tok[2], p.y()) ||
                !parse_double(tok[3], p.z()))
                throw ParseError(path, reader.number(), "malformed vertex record");
            verts.push_back(p);
        } else if (tok[0] == "f") {
            if (tok.size() < 4) throw ParseError(path, reader.number(), "face needs 3 or more indices");
            std::vector<int> idx;
            for (std::size_t k = 1; k < tok.size(); ++k) {
                const std::string_view head = tok[k].substr(0, tok[k].find('/'));
                long v = 0;
                if (!parse_long(head, v) || v == 0)
                    throw ParseError(path, reader.number(), "malformed face index '" + std::string(tok[k]) + "'");
                // negative indices are relative to the vertices read so far
                const long resolved = v > 0 ? v - 1 : static_cast<long>(verts.size()) + v;
                if (resolved < 0 || resolved >= static_cast<long>(verts.size()))
                    throw ParseError(path, reader.number(), "face index " + std::to_string(v) + " out of range");
                idx.push_back(static_cast<int>(resolved));
            }
            for (std::size_t k = 1; k + 1 < idx.size(); ++k) shape.faces.push_back({idx[0], idx[k], idx[k + 1]});
        }
        // vt, vn, g, o, usemtl, mtllib, s: ignored
    }
    shape.vertices.resize(3, static_cast<Eigen::Index>(verts.size()));
    for (std::size_t i = 0; i < verts.size(); ++i) shape.vertices.col(static_cast<Eigen::Index>(i)) = verts[i];
    finalize_loaded(shape, path);
    return shape;
}

enum class PlyType { int8, uint8, int16, uint16, int32, uint32, float32, float64 };

inline bool ply_type_from_name(std::string_view name, PlyType& t) {
    static const std::pair<std::string_view, PlyType> table[] = {
        {"char", PlyType::int8},     {"int8", PlyType::int8},       {"uchar", PlyType::uint8},
        {"uint8", PlyType::uint8},   {"short", PlyType::int16},     {"int16", PlyType::int16},
        {"ushort", PlyType::uint16}, {"uint16", PlyType::uint16},   {"int", PlyType::int32},
        {"int32", PlyType::int32},   {"uint", PlyType::uint32},     {"uint32", PlyType::uint32},
        {"float", PlyType::float32}, {"float32", PlyType::float32}, {"double", PlyType::float64},
        {"float64", PlyType::float64}};
    for (const auto& [n, ty] : table)
        if (n == name) {
            t = ty;
            return true;
        }
    return false;
}

inline std::size_t ply_type_size(PlyType t) {
    switch (t) {
        case PlyType::int8:
        case PlyType::uint8: return 1;
        case PlyType::int16:
        case PlyType::uint16: return 2;
        case PlyType::int32:
        case PlyType::uint32:
        case PlyType::float32: return 4;
        case PlyType::float64: return 8;
    }
    return 0;
}

template <typename T>
T load_le(const char* p) {
    static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

inline double ply_read_binary(PlyType t, const char* p) {
    switch (t) {
        case PlyType::int8: return load_le<std::int8_t>(p);
        case PlyType::uint8: return load_le<std::uint8_t>(p);
        case PlyType::int16: return load_le<std::int16_t>(p);
        case PlyType::uint16: return load_le<std::uint16_t>(p);
        case PlyType::int32: return load_le<std::int32_t>(p);
        case PlyType::uint32: return load_le<std::uint32_t>(p);
        case PlyType::float32: return load_le<float>(p);
        case PlyType::float64: return load_le<double>(p);
    }
    return 0.0;
}

struct PlyProperty {
    std::string name;
    PlyType type = PlyType::float32;
    bool is_list = false;
    PlyType count_type = PlyType::uint8;
};

struct PlyElement {
    std::string name;
    std::size_t count = 0;
    std::vector<PlyProperty> props;
};

inline Shape load_ply(const std::string& path) {
    const std::string text = read_file_bytes(path);
    LineReader reader(text);
    std::string_view line;
    if (!reader.next(line) || line != "ply") throw ParseError(path, 1, "missing 'ply' magic");

    bool ascii = false, have_format = false, have_end = false;
    std::vector<PlyElement> elements;
    while (reader.next(line)) {
        const auto tok = tokenize(line);
        if (tok.empty()) continue;
        if (tok[0] == "format") {
            if (tok.size() < 2) throw ParseError(path, reader.number(), "malformed format line");
            if (tok[1] == "ascii") ascii = true;
            else if (tok[1] == "binary_little_endian") ascii = false;
            else throw ParseError(path, reader.number(), "unsupported PLY format '" + std::string(tok[1]) + "'");
            have_format = true;
        } else if (tok[0] == "comment" || tok[0] == "obj_info") {
            continue;
        } else if (tok[0] == "element") {
            long count = 0;
            if (tok.size() != 3 || !parse_long(tok[2], count) || count < 0)
                throw ParseError(path, reader.number(), "malformed element line");
            elements.push_back({std::string(tok[1]), static_cast<std::size_t>(count), {}});
        } else if (tok[0] == "property") {
            if (elements.empty()) throw ParseError(path, reader.number(), "property before element");
            PlyProperty prop;
            if (tok.size() == 5 && tok[1] == "list") {
                prop.is_list = true;
                if (!ply_type_from_name(tok[2], prop.count_type) || !ply_type_from_name(tok[3], prop.type))
                    throw ParseError(path, reader.number(), "unknown property type");
                prop.name = tok[4];
            } else if (tok.size() == 3) {
                if (!ply_type_from_name(tok[1], prop.type))
                    throw ParseError(path, reader.number(), "unknown property type '" + std::string(tok[1]) + "'");
                prop.name = tok[2];
            } else {
                throw ParseError(path, reader.number(), "malformed property line");
            }
            elements.back().props.push_back(prop);
        } else if (tok[0] == "end_header") {
            have_end = true;
            break;
        } else {
            throw ParseError(path, reader.number(), "unexpected header keyword '" + std::string(tok[0]) + "'");
        }
    }
    if (!have_format || !have_end) throw ParseError(path, reader.number(), "incomplete PLY header");

    Shape shape;
    std::vector<Eigen::Vector3d> verts;
    auto store_element = [&](const PlyElement& el, const std::vector<std::vector<double>>& values,
                             std::size_t line_no) {
        if (el.name == "vertex") {
            Eigen::Vector3d p = Eigen::Vector3d::Zero();
            int found = 0;
            for (std::size_t k = 0; k < el.props.size(); ++k) {
                const std::string& n = el.props[k].name;
                if (el.props[k].is_list) continue;
                if (n == "x") p.x() = values[k][0], found |= 1;
                else if (n == "y") p.y() = values[k][0], found |= 2;
                else if (n == "z") p.z() = values[k][0], found |= 4;
            }
            if (found != 7) throw ParseError(path, line_no, "vertex element lacks x, y, z properties");
            verts.push_back(p);
        } else if (el.name == "face") {
            for (std::size_t k = 0; k < el.props.size(); ++k) {
                const auto& prop = el.props[k];
                if (!prop.is_list || (prop.name != "vertex_indices" && prop.name != "vertex_index")) continue;
                const auto& idx = values[k];
                if (idx.size() < 3) throw ParseError(path, line_no, "face with fewer than 3 vertices");
                for (std::size_t t = 1; t + 1 < idx.size(); ++t)
                    shape.faces.push_back({static_cast<int>(idx[0]), static_cast<int>(idx[t]),
                                           static_cast<int>(idx[t + 1])});
            }
        }
    };

    if (ascii) {
        for (const PlyElement& el : elements) {
            for (std::size_t r = 0; r < el.count; ++r) {
                std::vector<std::string_view> tok;
                do {
                    if (!reader.next(line))
                        throw ParseError(path, reader.number() + 1,
                                         "unexpected end of file in element '" + el.name + "'");
                    tok = tokenize(line);
                } while (tok.empty());
                std::size_t cursor = 0;
                std::vector<std::vector<double>> values(el.props.size());
                for (std::size_t k = 0; k < el.props.size(); ++k) {
                    auto take = [&]() {
                        double v = 0;
                        if (cursor >= tok.size() || !parse_double(tok[cursor], v))
                            throw ParseError(path, reader.number(),
                                             "truncated or malformed '" + el.name + "' record");
                        ++cursor;
                        return v;
                    };
                    if (el.props[k].is_list) {
                        const double cnt = take();
                        if (cnt < 0) throw ParseError(path, reader.number(), "negative list count");
                        for (long c = 0; c < static_cast<long>(cnt); ++c) values[k].push_back(take());
                    } else {
                        values[k].push_back(take());
                    }
                }
                store_element(el, values, reader.number());
            }
        }
    } else {
        std::size_t pos = reader.offset();
        for (const PlyElement& el : elements) {
            for (std::size_t r = 0; r < el.count; ++r) {
                std::vector<std::vector<double>> values(el.props.size());
                auto need = [&](std::size_t bytes) {
                    if (pos + bytes > text.size())
                        throw ParseError(path, 0,
                                         "unexpected end of binary data in element '" + el.name + "' record " +
                                             std::to_string(r) + " (byte offset " + std::to_string(pos) + ")");
                };
                for (std::size_t k = 0; k < el.props.size(); ++k) {
                    const auto& prop = el.props[k];
                    if (prop.is_list) {
                        need(ply_type_size(prop.count_type));
                        const double cnt = ply_read_binary(prop.count_type, text.data() + pos);
                        pos += ply_type_size(prop.count_type);
                        if (cnt < 0) throw ParseError(path, 0, "negative list count");
                        const std::size_t sz = ply_type_size(prop.type);
                        need(sz * static_cast<std::size_t>(cnt));
                        for (long c = 0; c < static_cast<long>(cnt); ++c, pos += sz)
                            values[k].push_back(ply_read_binary(prop.type, text.data() + pos));
                    } else {
                        const std::size_t sz = ply_type_size(prop.type);
                        need(sz);
                        values[k].push_back(ply_read_binary(prop.type, text.data() + pos));
                        pos += sz;
                    }
                }
                store_element(el, values, 0);
            }
        }
    }

    shape.vertices.resize(3, static_cast<Eigen::Index>(verts.size()));
    for (std::size_t i = 0; i < verts.size(); ++i) shape.vertices.col(static_cast<Eigen::Index>(i)) = verts[i];
    finalize_loaded(shape, path);
    return shape;
}

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + path + "'");
}

template <typename T>
void append_le(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

}  // namespace detail

inline MeshFormat format_from_path(const std::string& path) {
    std::string ext = std::filesystem::path(path).extension().string();
    for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == ".obj") return MeshFormat::obj;
    if (ext == ".ply") return MeshFormat::ply;
    throw Error("cannot infer mesh format from '" + path + "' (expected .obj or .ply)");
}

/// Loads an OBJ or PLY shape. Mesh edges are derived from faces; point clouds
/// are returned without edges (see build_edge_graph).
inline Shape load_shape(const std::string& path, MeshFormat format) {
    if (!std::filesystem::exists(path)) throw Error("file not found: '" + path + "'");
    return format == MeshFormat::obj ? detail::load_obj(path) : detail::load_ply(path);
}

inline Shape load_shape(const std::string& path) { return load_shape(path, format_from_path(path)); }

/// Serializes to bytes. Text reals use 9 significant digits; binary PLY stores
/// float64 so coordinates round-trip exactly.
inline std::string encode_shape(const Shape& shape, MeshFormat format,
                                PlyEncoding encoding = PlyEncoding::binary_little_endian) {
    using detail::format_real;
    const int n = shape.size();
    const bool colors = static_cast<int>(shape.colors.size()) == n && n > 0;
    std::string out;
    if (format == MeshFormat::obj) {
        for (int i = 0; i < n; ++i)
            out += "v " + format_real(shape.vertices(0, i)) + " " + format_real(shape.vertices(1, i)) + " " +
                   format_real(shape.vertices(2, i)) + "\n";
        for (const Face& f : shape.faces)
            out += "f " + std::to_string(f[0] + 1) + " " + std::to_string(f[1] + 1) + " " +
                   std::to_string(f[2] + 1) + "\n";
        return out;
    }
    const bool ascii = encoding == PlyEncoding::ascii;
    const char* real_type = "double";
    out += "ply\n";
    out += ascii ? "format ascii 1.0\n" : "format binary_little_endian 1.0\n";
    out += "element vertex " + std::to_string(n) + "\n";
    out += std::string("property ") + real_type + " x\nproperty " + real_type + " y\nproperty " + real_type + " z\n";
    if (colors) out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    out += "element face " + std::to_string(shape.faces.size()) + "\n";
    out += "property list uchar int vertex_indices\nend_header\n";
    for (int i = 0; i < n; ++i) {
        if (ascii) {
            out += format_real(shape.vertices(0, i)) + " " + format_real(shape.vertices(1, i)) + " " +
                   format_real(shape.vertices(2, i));
            if (colors)
                for (auto c : shape.colors[i]) out += " " + std::to_string(c);
            out += "\n";
        } else {
            for (int d = 0; d < 3; ++d) detail::append_le<double>(out, shape.vertices(d, i));
            if (colors)
                for (auto c : shape.colors[i]) detail::append_le<std::uint8_t>(out, c);
        }
    }
    for (const Face& f : shape.faces) {
        if (ascii) {
            out += "3 " + std::to_string(f[0]) + " " + std::to_string(f[1]) + " " + std::to_string(f[2]) + "\n";
        } else {
            detail::append_le<std::uint8_t>(out, 3);
            for (int v : f) detail::append_le<std::int32_t>(out, v);
        }
    }
    return out;
}

inline void save_shape(const Shape& shape, const std::string& path, MeshFormat format,
                       PlyEncoding encoding = PlyEncoding::binary_little_endian) {
    detail::write_file_bytes(path, encode_shape(shape, format, encoding));
}

inline void save_shape(const Shape& shape, const std::string& path) {
    save_shape(shape, path, format_from_path(path));
}

}  // namespace nrreg
