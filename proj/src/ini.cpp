#include "dpt/ini.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dpt/error.hpp"

namespace dpt {
namespace {

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <class T>
T parse_number(const std::string& text, const std::string& where) {
    T value{};
    const char* begin = text.data();
    const char* end = begin + text.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end) throw ConfigError(where + ": cannot parse '" + text + "' as a number");
    return value;
}

}  // namespace

IniDocument IniDocument::parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str(), path.string());
}

IniDocument IniDocument::parse_string(const std::string& text, const std::string& source_name) {
    IniDocument doc;
    doc.source_ = source_name;
    // boost's parser only accepts ';' comments; map '#' lines onto them.
    std::string normalized;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        const std::string t = trim(line);
        normalized += (!t.empty() && t[0] == '#') ? ";" + t : line;
        normalized += '\n';
    }
    std::istringstream in(normalized);
    try {
        boost::property_tree::ini_parser::read_ini(in, doc.tree_);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(source_name + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    return doc;
}

bool IniDocument::has_section(const std::string& section) const { return tree_.find(section) != tree_.not_found(); }

bool IniDocument::has(const std::string& section, const std::string& key) const {
    auto it = tree_.find(section);
    return it != tree_.not_found() && it->second.find(key) != it->second.not_found();
}

std::vector<std::string> IniDocument::sections() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : tree_) out.push_back(name);
    return out;
}

std::vector<std::string> IniDocument::keys(const std::string& section) const {
    std::vector<std::string> out;
    auto it = tree_.find(section);
    if (it == tree_.not_found()) return out;
    for (const auto& [name, _] : it->second) out.push_back(name);
    return out;
}

std::string IniDocument::get_string(const std::string& section, const std::string& key) const {
    auto it = tree_.find(section);
    if (it == tree_.not_found()) throw ConfigError(source_ + ": missing section [" + section + "]");
    auto kt = it->second.find(key);
    if (kt == it->second.not_found()) throw ConfigError(source_ + ": missing key " + section + "." + key);
    return trim(kt->second.data());
}

std::int64_t IniDocument::get_int(const std::string& section, const std::string& key) const {
    return parse_number<std::int64_t>(get_string(section, key), source_ + ": " + section + "." + key);
}

double IniDocument::get_double(const std::string& section, const std::string& key) const {
    return parse_number<double>(get_string(section, key), source_ + ": " + section + "." + key);
}

bool IniDocument::get_bool(const std::string& section, const std::string& key) const {
    const std::string v = get_string(section, key);
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError(source_ + ": " + section + "." + key + ": expected true/false/on/off, got '" + v + "'");
}

std::vector<double> IniDocument::get_doubles(const std::string& section, const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : split_list(get_string(section, key))) {
        out.push_back(parse_number<double>(item, source_ + ": " + section + "." + key));
    }
    return out;
}

std::vector<std::int64_t> IniDocument::get_ints(const std::string& section, const std::string& key) const {
    std::vector<std::int64_t> out;
    for (const auto& item : split_list(get_string(section, key))) {
        out.push_back(parse_number<std::int64_t>(item, source_ + ": " + section + "." + key));
    }
    return out;
}

void IniDocument::require_sections(std::initializer_list<const char*> allowed) const {
    for (const auto& [name, node] : tree_) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return name == a; })) {
            if (node.empty()) throw ConfigError(source_ + ": key '" + name + "' outside any section");
            throw ConfigError(source_ + ": unknown section [" + name + "]");
        }
    }
}

void IniDocument::require_keys(const std::string& section, std::initializer_list<const char*> allowed) const {
    for (const auto& key : keys(section)) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            throw ConfigError(source_ + ": unknown key " + section + "." + key);
        }
    }
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace dpt
