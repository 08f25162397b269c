#pragma once

// Strict reading of JSON objects into config structs.

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

namespace hvm {

// Throws std::invalid_argument naming the first key not in `allowed`.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                                std::string_view where) {
    if (!j.is_object()) throw std::invalid_argument(std::string(where) + ": expected an object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (auto a : allowed) known = known || item.key() == a;
        if (!known) throw std::invalid_argument(std::string(where) + ": unknown key '" + item.key() + "'");
    }
}

// Assigns j[key] to out when present; type errors name the key.
template <typename T>
void read_field(const nlohmann::json& j, std::string_view key, T& out, std::string_view where) {
    const auto it = j.find(std::string(key));
    if (it == j.end()) return;
    try {
        out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
        throw std::invalid_argument(std::string(where) + ": key '" + std::string(key) + "' has the wrong type");
    }
}

}  // namespace hvm
