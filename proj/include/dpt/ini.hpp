#pragma once

#include <boost/property_tree/ptree.hpp>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

namespace dpt {

/// Sectioned key-value document ("[section]" headers, "key = value" lines,
/// ';' or '#' comments). Lookups are typed and report the offending
/// "section.key" on failure.
class IniDocument {
public:
    static IniDocument parse_file(const std::filesystem::path& path);
    static IniDocument parse_string(const std::string& text, const std::string& source_name = "<string>");

    bool has_section(const std::string& section) const;
    bool has(const std::string& section, const std::string& key) const;
    std::vector<std::string> sections() const;
    std::vector<std::string> keys(const std::string& section) const;

    std::string get_string(const std::string& section, const std::string& key) const;
    std::int64_t get_int(const std::string& section, const std::string& key) const;
    double get_double(const std::string& section, const std::string& key) const;
    bool get_bool(const std::string& section, const std::string& key) const;
    std::vector<double> get_doubles(const std::string& section, const std::string& key) const;
    std::vector<std::int64_t> get_ints(const std::string& section, const std::string& key) const;

    // Throws ConfigError for any key or section outside the allowed sets.
    void require_sections(std::initializer_list<const char*> allowed) const;
    void require_keys(const std::string& section, std::initializer_list<const char*> allowed) const;

private:
    std::string source_;
    boost::property_tree::ptree tree_;
};

std::string format_double(double v);

}  // namespace dpt
