#pragma once

#include <string>
#include <vector>

namespace ngpu {

// One shared global alphabet (digits 0-9, the four operators, padding) so the
// same embedding works across every base of a curriculum. A base-b task only
// ever emits digits below b.
using Symbol = int;

inline constexpr Symbol kSymbolPlus = 10;
inline constexpr Symbol kSymbolMinus = 11;
inline constexpr Symbol kSymbolTimes = 12;
inline constexpr Symbol kSymbolDivide = 13;
inline constexpr Symbol kSymbolPad = 14;
inline constexpr int kAlphabetSize = 15;

char symbol_to_char(Symbol s);
Symbol char_to_symbol(char c);

std::vector<Symbol> to_symbols(const std::string& text);
std::string symbols_to_string(const std::vector<Symbol>& symbols);

inline bool is_digit_symbol(Symbol s) { return s >= 0 && s < 10; }
inline bool is_operator_symbol(Symbol s) { return s >= kSymbolPlus && s <= kSymbolDivide; }

}  // namespace ngpu
