#include "ngpu/symbols.hpp"

#include "ngpu/errors.hpp"

namespace ngpu {

char symbol_to_char(Symbol s) {
  if (s >= 0 && s < 10) return static_cast<char>('0' + s);
  switch (s) {
    case kSymbolPlus: return '+';
    case kSymbolMinus: return '-';
    case kSymbolTimes: return '*';
    case kSymbolDivide: return '/';
    case kSymbolPad: return '_';
  }
  throw ContractViolation("symbol_to_char: symbol out of alphabet: " + std::to_string(s));
}

Symbol char_to_symbol(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  switch (c) {
    case '+': return kSymbolPlus;
    case '-': return kSymbolMinus;
    case '*': return kSymbolTimes;
    case '/': return kSymbolDivide;
    case '_': return kSymbolPad;
  }
  throw ContractViolation(std::string("char_to_symbol: character out of alphabet: '") + c + "'");
}

std::vector<Symbol> to_symbols(const std::string& text) {
  std::vector<Symbol> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(char_to_symbol(c));
  return out;
}

std::string symbols_to_string(const std::vector<Symbol>& symbols) {
  std::string out;
  out.reserve(symbols.size());
  for (Symbol s : symbols) out.push_back(symbol_to_char(s));
  return out;
}

}  // namespace ngpu
