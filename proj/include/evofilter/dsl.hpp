// The matrix-program mini-language shared by graph decoding, LLM
// completions, and fixture files: parser, canonical printer, validator,
// and a sandboxed interpreter.
//
// Grammar (files use extension .mdsl):
//   program := "fn" IDENT "(" idents ")" "->" "(" idents ")" "{" stmt* "}"
//   stmt    := IDENT "=" expr [";"]
//   expr    := term (("+" | "-") term)*
//   term    := factor ("@" factor)*
//   factor  := NUMBER ["*" factor] | "-" factor | IDENT | "(" expr ")"
//            | FNAME "(" args ")"
//   FNAME   := inv | tr | tanh | sin | cos | log | exp | abs | square
//            | maxs | rowmin | mean | norm | eye
//
// Scalars exist only as literals; a statement whose right side is a bare
// scalar binds a 1x1 matrix. Variables always hold matrices.
#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "matrix.hpp"

namespace evofilter::dsl {

// ---------------------------------------------------------------------------
// Signatures and the AST

struct Signature {
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    bool anti_leak = false;

    /// Generic scheme i_1..i_n -> o_1..o_m used by anti-leak tasks.
    static Signature generic(std::size_t n_in, std::size_t n_out) {
        Signature sig;
        sig.anti_leak = true;
        for (std::size_t i = 1; i <= n_in; ++i)
            sig.inputs.push_back("i_" + std::to_string(i));
        for (std::size_t o = 1; o <= n_out; ++o)
            sig.outputs.push_back("o_" + std::to_string(o));
        return sig;
    }

    bool operator==(const Signature& other) const {
        return inputs == other.inputs && outputs == other.outputs;
    }
};

enum class ExprKind {
    Ref,         // input or earlier local
    MatMul,
    Add,
    Sub,
    Invert,
    Transpose,
    Elementwise, // unary op tag
    ScalarOp,    // scale / add-scalar / max-with-scalar, constant attached
    Reduce,      // rowmin / mean / norm
    Identity,    // eye(n)
    ScalarLit,
};

enum class ScalarOpKind { Scale, AddScalar, MaxScalar };
enum class ReduceKind { RowMin, Mean, Norm };

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

struct Expr {
    ExprKind kind{};
    ExprPtr lhs; // unary operand or left child
    ExprPtr rhs;
    std::string name;          // Ref
    UnaryOp unary{};           // Elementwise
    ScalarOpKind scalar_op{};  // ScalarOp
    ReduceKind reduce{};       // Reduce
    double value = 0.0;        // ScalarLit or ScalarOp constant
    std::size_t dim = 0;       // Identity
};

struct Statement {
    std::string target;
    ExprPtr expr;
    int line = 0;
    int col = 0;
};

struct Program {
    std::string name = "f";
    Signature signature;
    std::vector<Statement> statements;
};

inline bool expr_equal(const ExprPtr& a, const ExprPtr& b) {
    if (a == b)
        return true;
    if (!a || !b || a->kind != b->kind)
        return false;
    switch (a->kind) {
    case ExprKind::Ref: return a->name == b->name;
    case ExprKind::ScalarLit: return a->value == b->value;
    case ExprKind::Identity: return a->dim == b->dim;
    case ExprKind::Elementwise:
        return a->unary == b->unary && expr_equal(a->lhs, b->lhs);
    case ExprKind::Reduce:
        return a->reduce == b->reduce && expr_equal(a->lhs, b->lhs);
    case ExprKind::ScalarOp:
        return a->scalar_op == b->scalar_op && a->value == b->value && expr_equal(a->lhs, b->lhs);
    case ExprKind::Invert:
    case ExprKind::Transpose:
        return expr_equal(a->lhs, b->lhs);
    case ExprKind::MatMul:
    case ExprKind::Add:
    case ExprKind::Sub:
        return expr_equal(a->lhs, b->lhs) && expr_equal(a->rhs, b->rhs);
    }
    return false;
}

/// Structural equality: signature names and statement bodies.
/// The function name is cosmetic and ignored.
inline bool operator==(const Program& a, const Program& b) {
    if (!(a.signature == b.signature) || a.statements.size() != b.statements.size())
        return false;
    for (std::size_t i = 0; i < a.statements.size(); ++i) {
        if (a.statements[i].target != b.statements[i].target ||
            !expr_equal(a.statements[i].expr, b.statements[i].expr))
            return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Errors

struct parse_error : std::runtime_error {
    int line;
    int col;
    parse_error(const std::string& msg, int line_, int col_)
        : std::runtime_error(msg + " at " + std::to_string(line_) + ":" + std::to_string(col_)),
          line(line_), col(col_) {}
};

enum class EvalErrorKind { Singular, NonFinite, ShapeMismatch, StepLimit, MissingInput };

struct EvalError : std::runtime_error {
    EvalErrorKind kind;
    std::size_t statement_index;
    EvalError(EvalErrorKind kind_, std::size_t stmt, const std::string& msg)
        : std::runtime_error("statement " + std::to_string(stmt) + ": " + msg),
          kind(kind_), statement_index(stmt) {}
};

struct GuardConfig {
    std::size_t max_statements = 64;
};

// ---------------------------------------------------------------------------
// Number formatting: shortest text that parses back to the same double.

inline std::string format_number(double v) {
    if (v == 0.0)
        v = 0.0; // normalize -0
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

// ---------------------------------------------------------------------------
// Lexer

namespace detail {

enum class Tok { Ident, Number, LParen, RParen, LBrace, RBrace, Comma, Arrow,
                 Assign, Plus, Minus, At, Star, Semi, End };

struct Token {
    Tok kind = Tok::End;
    std::string text;
    double number = 0.0;
    int line = 1;
    int col = 1;
};

class Lexer {
public:
    explicit Lexer(std::string_view src) : src_(src) { advance(); }

    const Token& peek() const { return current_; }

    Token next() {
        Token t = current_;
        advance();
        return t;
    }

private:
    void advance() {
        skip_space();
        current_ = Token{};
        current_.line = line_;
        current_.col = col_;
        if (pos_ >= src_.size()) {
            current_.kind = Tok::End;
            return;
        }
        const char c = src_[pos_];
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t start = pos_;
            while (pos_ < src_.size() &&
                   (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
                bump();
            current_.kind = Tok::Ident;
            current_.text = std::string(src_.substr(start, pos_ - start));
            return;
        }
        if (std::isdigit(static_cast<unsigned char>(c))) {
            std::size_t start = pos_;
            while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_])))
                bump();
            if (pos_ < src_.size() && src_[pos_] == '.') {
                bump();
                while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_])))
                    bump();
            }
            if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
                std::size_t mark = pos_;
                bump();
                if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-'))
                    bump();
                if (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) {
                    while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_])))
                        bump();
                } else {
                    pos_ = mark; // bare 'e' was not an exponent
                }
            }
            const std::string_view text = src_.substr(start, pos_ - start);
            double value = 0.0;
            auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
            if (ec != std::errc() || ptr != text.data() + text.size())
                throw parse_error("malformed number '" + std::string(text) + "'",
                                  current_.line, current_.col);
            current_.kind = Tok::Number;
            current_.number = value;
            current_.text = std::string(text);
            return;
        }
        bump();
        switch (c) {
        case '(': current_.kind = Tok::LParen; return;
        case ')': current_.kind = Tok::RParen; return;
        case '{': current_.kind = Tok::LBrace; return;
        case '}': current_.kind = Tok::RBrace; return;
        case ',': current_.kind = Tok::Comma; return;
        case '+': current_.kind = Tok::Plus; return;
        case '@': current_.kind = Tok::At; return;
        case '*': current_.kind = Tok::Star; return;
        case ';': current_.kind = Tok::Semi; return;
        case '=': current_.kind = Tok::Assign; return;
        case '-':
            if (pos_ < src_.size() && src_[pos_] == '>') {
                bump();
                current_.kind = Tok::Arrow;
            } else {
                current_.kind = Tok::Minus;
            }
            return;
        default:
            throw parse_error(std::string("unexpected character '") + c + "'",
                              current_.line, current_.col);
        }
    }

    void skip_space() {
        while (pos_ < src_.size()) {
            const char c = src_[pos_];
            if (c == '#') { // line comment
                while (pos_ < src_.size() && src_[pos_] != '\n')
                    bump();
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                bump();
            } else {
                break;
            }
        }
    }

    void bump() {
        if (src_[pos_] == '\n') {
            ++line_;
            col_ = 1;
        } else {
            ++col_;
        }
        ++pos_;
    }

    std::string_view src_;
    std::size_t pos_ = 0;
    int line_ = 1;
    int col_ = 1;
    Token current_;
};

inline ExprPtr make_expr(Expr e) { return std::make_shared<Expr>(std::move(e)); }

// A parsed expression is statically either a matrix or a scalar literal.
struct Typed {
    ExprPtr expr;
    bool is_scalar = false;
};

struct FnInfo {
    enum class Kind { Invert, Transpose, Elementwise, Reduce, Maxs, Eye } kind;
    UnaryOp unary = UnaryOp::Tanh;
    ReduceKind reduce = ReduceKind::RowMin;
};

inline const std::map<std::string, FnInfo, std::less<>>& function_table() {
    static const std::map<std::string, FnInfo, std::less<>> table = {
        {"inv", {FnInfo::Kind::Invert, {}, {}}},
        {"tr", {FnInfo::Kind::Transpose, {}, {}}},
        {"tanh", {FnInfo::Kind::Elementwise, UnaryOp::Tanh, {}}},
        {"sin", {FnInfo::Kind::Elementwise, UnaryOp::Sin, {}}},
        {"cos", {FnInfo::Kind::Elementwise, UnaryOp::Cos, {}}},
        {"log", {FnInfo::Kind::Elementwise, UnaryOp::Log, {}}},
        {"exp", {FnInfo::Kind::Elementwise, UnaryOp::Exp, {}}},
        {"abs", {FnInfo::Kind::Elementwise, UnaryOp::Abs, {}}},
        {"square", {FnInfo::Kind::Elementwise, UnaryOp::Square, {}}},
        {"maxs", {FnInfo::Kind::Maxs, {}, {}}},
        {"rowmin", {FnInfo::Kind::Reduce, {}, ReduceKind::RowMin}},
        {"mean", {FnInfo::Kind::Reduce, {}, ReduceKind::Mean}},
        {"norm", {FnInfo::Kind::Reduce, {}, ReduceKind::Norm}},
        {"eye", {FnInfo::Kind::Eye, {}, {}}},
    };
    return table;
}

inline bool is_reserved(std::string_view name) {
    return name == "fn" || function_table().count(name) > 0;
}

class Parser {
public:
    explicit Parser(std::string_view src) : lex_(src) {}

    Program parse_program() {
        expect_keyword("fn");
        Program p;
        p.name = expect_name("function name");
        p.signature.inputs = parse_name_list();
        expect(Tok::Arrow, "'->'");
        p.signature.outputs = parse_name_list();
        if (p.signature.outputs.empty())
            throw parse_error("signature must declare at least one output",
                              lex_.peek().line, lex_.peek().col);
        check_unique(p.signature.inputs, "input");
        check_unique(p.signature.outputs, "output");
        p.signature.anti_leak = matches_generic(p.signature);

        scope_.clear();
        for (const auto& in : p.signature.inputs)
            scope_.push_back(in);

        expect(Tok::LBrace, "'{'");
        while (lex_.peek().kind != Tok::RBrace) {
            if (lex_.peek().kind == Tok::End)
                throw parse_error("unexpected end of input, missing '}'",
                                  lex_.peek().line, lex_.peek().col);
            p.statements.push_back(parse_statement());
        }
        lex_.next(); // consume '}'
        if (lex_.peek().kind != Tok::End)
            throw parse_error("trailing input after program body",
                              lex_.peek().line, lex_.peek().col);
        return p;
    }

private:
    Statement parse_statement() {
        Token name = lex_.next();
        if (name.kind != Tok::Ident)
            throw parse_error("expected a statement target name", name.line, name.col);
        if (is_reserved(name.text))
            throw parse_error("'" + name.text + "' is a reserved function name",
                              name.line, name.col);
        expect(Tok::Assign, "'='");
        Typed rhs = parse_expr();
        if (lex_.peek().kind == Tok::Semi)
            lex_.next();
        Statement stmt;
        stmt.target = name.text;
        stmt.expr = rhs.expr;
        stmt.line = name.line;
        stmt.col = name.col;
        if (!in_scope(name.text))
            scope_.push_back(name.text);
        return stmt;
    }

    Typed parse_expr() {
        Typed lhs = parse_term();
        while (lex_.peek().kind == Tok::Plus || lex_.peek().kind == Tok::Minus) {
            Token op = lex_.next();
            Typed rhs = parse_term();
            lhs = combine_additive(lhs, rhs, op);
        }
        return lhs;
    }

    Typed parse_term() {
        Typed lhs = parse_factor();
        while (lex_.peek().kind == Tok::At) {
            Token op = lex_.next();
            Typed rhs = parse_factor();
            if (lhs.is_scalar || rhs.is_scalar)
                throw parse_error("'@' requires matrix operands", op.line, op.col);
            Expr e;
            e.kind = ExprKind::MatMul;
            e.lhs = lhs.expr;
            e.rhs = rhs.expr;
            lhs = {make_expr(std::move(e)), false};
        }
        return lhs;
    }

    Typed parse_factor() {
        const Token& t = lex_.peek();
        switch (t.kind) {
        case Tok::Minus: {
            lex_.next();
            Typed inner = parse_factor();
            return negate(inner);
        }
        case Tok::Number: {
            Token num = lex_.next();
            if (lex_.peek().kind == Tok::Star) {
                Token star = lex_.next();
                Typed rhs = parse_factor();
                if (rhs.is_scalar) {
                    Expr e;
                    e.kind = ExprKind::ScalarLit;
                    e.value = num.number * rhs.expr->value;
                    return {make_expr(std::move(e)), true};
                }
                (void)star;
                Expr e;
                e.kind = ExprKind::ScalarOp;
                e.scalar_op = ScalarOpKind::Scale;
                e.value = num.number;
                e.lhs = rhs.expr;
                return {make_expr(std::move(e)), false};
            }
            Expr e;
            e.kind = ExprKind::ScalarLit;
            e.value = num.number;
            return {make_expr(std::move(e)), true};
        }
        case Tok::LParen: {
            lex_.next();
            Typed inner = parse_expr();
            expect(Tok::RParen, "')'");
            return inner;
        }
        case Tok::Ident: {
            Token name = lex_.next();
            if (lex_.peek().kind == Tok::LParen)
                return parse_call(name);
            if (is_reserved(name.text))
                throw parse_error("'" + name.text + "' is a reserved function name",
                                  name.line, name.col);
            if (!in_scope(name.text))
                throw parse_error("use of '" + name.text + "' before assignment",
                                  name.line, name.col);
            Expr e;
            e.kind = ExprKind::Ref;
            e.name = name.text;
            return {make_expr(std::move(e)), false};
        }
        default:
            throw parse_error("expected an expression", t.line, t.col);
        }
    }

    Typed parse_call(const Token& name) {
        auto it = function_table().find(name.text);
        if (it == function_table().end())
            throw parse_error("unknown function '" + name.text + "'", name.line, name.col);
        lex_.next(); // '('
        std::vector<Typed> args;
        if (lex_.peek().kind != Tok::RParen) {
            args.push_back(parse_expr());
            while (lex_.peek().kind == Tok::Comma) {
                lex_.next();
                args.push_back(parse_expr());
            }
        }
        expect(Tok::RParen, "')'");

        const FnInfo& info = it->second;
        auto require_arity = [&](std::size_t n) {
            if (args.size() != n)
                throw parse_error("'" + name.text + "' expects " + std::to_string(n) +
                                      " argument(s), got " + std::to_string(args.size()),
                                  name.line, name.col);
        };
        auto require_matrix = [&](const Typed& arg) {
            if (arg.is_scalar)
                throw parse_error("'" + name.text + "' expects a matrix argument",
                                  name.line, name.col);
        };

        Expr e;
        switch (info.kind) {
        case FnInfo::Kind::Invert:
            require_arity(1);
            require_matrix(args[0]);
            e.kind = ExprKind::Invert;
            e.lhs = args[0].expr;
            break;
        case FnInfo::Kind::Transpose:
            require_arity(1);
            require_matrix(args[0]);
            e.kind = ExprKind::Transpose;
            e.lhs = args[0].expr;
            break;
        case FnInfo::Kind::Elementwise:
            require_arity(1);
            require_matrix(args[0]);
            e.kind = ExprKind::Elementwise;
            e.unary = info.unary;
            e.lhs = args[0].expr;
            break;
        case FnInfo::Kind::Reduce:
            require_arity(1);
            require_matrix(args[0]);
            e.kind = ExprKind::Reduce;
            e.reduce = info.reduce;
            e.lhs = args[0].expr;
            break;
        case FnInfo::Kind::Maxs:
            require_arity(2);
            require_matrix(args[0]);
            if (!args[1].is_scalar)
                throw parse_error("'maxs' expects a scalar second argument",
                                  name.line, name.col);
            e.kind = ExprKind::ScalarOp;
            e.scalar_op = ScalarOpKind::MaxScalar;
            e.lhs = args[0].expr;
            e.value = args[1].expr->value;
            break;
        case FnInfo::Kind::Eye: {
            require_arity(1);
            if (!args[0].is_scalar)
                throw parse_error("'eye' expects a scalar dimension", name.line, name.col);
            const double v = args[0].expr->value;
            if (v < 1.0 || v != static_cast<double>(static_cast<std::size_t>(v)))
                throw parse_error("'eye' expects a positive integer dimension",
                                  name.line, name.col);
            e.kind = ExprKind::Identity;
            e.dim = static_cast<std::size_t>(v);
            break;
        }
        }
        return {make_expr(std::move(e)), false};
    }

    Typed combine_additive(const Typed& lhs, const Typed& rhs, const Token& op) {
        const bool plus = op.kind == Tok::Plus;
        if (lhs.is_scalar && rhs.is_scalar) {
            Expr e;
            e.kind = ExprKind::ScalarLit;
            e.value = plus ? lhs.expr->value + rhs.expr->value
                           : lhs.expr->value - rhs.expr->value;
            return {make_expr(std::move(e)), true};
        }
        if (!lhs.is_scalar && rhs.is_scalar) {
            Expr e;
            e.kind = ExprKind::ScalarOp;
            e.scalar_op = ScalarOpKind::AddScalar;
            e.lhs = lhs.expr;
            e.value = plus ? rhs.expr->value : -rhs.expr->value;
            return {make_expr(std::move(e)), false};
        }
        if (lhs.is_scalar && !rhs.is_scalar) {
            if (!plus)
                throw parse_error("scalar minus matrix is not supported; scale by -1 instead",
                                  op.line, op.col);
            Expr e;
            e.kind = ExprKind::ScalarOp;
            e.scalar_op = ScalarOpKind::AddScalar;
            e.lhs = rhs.expr;
            e.value = lhs.expr->value;
            return {make_expr(std::move(e)), false};
        }
        Expr e;
        e.kind = plus ? ExprKind::Add : ExprKind::Sub;
        e.lhs = lhs.expr;
        e.rhs = rhs.expr;
        return {make_expr(std::move(e)), false};
    }

    // Negation folds into constants: -(c) and -(c * X) stay exact.
    Typed negate(const Typed& operand) {
        if (operand.is_scalar) {
            Expr e;
            e.kind = ExprKind::ScalarLit;
            e.value = -operand.expr->value;
            if (e.value == 0.0)
                e.value = 0.0;
            return {make_expr(std::move(e)), true};
        }
        if (operand.expr->kind == ExprKind::ScalarOp &&
            operand.expr->scalar_op == ScalarOpKind::Scale) {
            Expr e;
            e.kind = ExprKind::ScalarOp;
            e.scalar_op = ScalarOpKind::Scale;
            e.lhs = operand.expr->lhs;
            e.value = -operand.expr->value;
            return {make_expr(std::move(e)), false};
        }
        Expr e;
        e.kind = ExprKind::ScalarOp;
        e.scalar_op = ScalarOpKind::Scale;
        e.lhs = operand.expr;
        e.value = -1.0;
        return {make_expr(std::move(e)), false};
    }

    std::vector<std::string> parse_name_list() {
        expect(Tok::LParen, "'('");
        std::vector<std::string> names;
        if (lex_.peek().kind != Tok::RParen) {
            names.push_back(expect_name("parameter name"));
            while (lex_.peek().kind == Tok::Comma) {
                lex_.next();
                names.push_back(expect_name("parameter name"));
            }
        }
        expect(Tok::RParen, "')'");
        return names;
    }

    static bool matches_generic(const Signature& sig) {
        for (std::size_t i = 0; i < sig.inputs.size(); ++i)
            if (sig.inputs[i] != "i_" + std::to_string(i + 1))
                return false;
        for (std::size_t o = 0; o < sig.outputs.size(); ++o)
            if (sig.outputs[o] != "o_" + std::to_string(o + 1))
                return false;
        return true;
    }

    void check_unique(const std::vector<std::string>& names, const char* what) {
        for (std::size_t i = 0; i < names.size(); ++i)
            for (std::size_t j = i + 1; j < names.size(); ++j)
                if (names[i] == names[j])
                    throw parse_error("duplicate " + std::string(what) + " name '" + names[i] + "'",
                                      lex_.peek().line, lex_.peek().col);
    }

    bool in_scope(const std::string& name) const {
        for (const auto& n : scope_)
            if (n == name)
                return true;
        return false;
    }

    std::string expect_name(const char* what) {
        Token t = lex_.next();
        if (t.kind != Tok::Ident)
            throw parse_error(std::string("expected ") + what, t.line, t.col);
        if (is_reserved(t.text))
            throw parse_error("'" + t.text + "' is a reserved function name", t.line, t.col);
        return t.text;
    }

    void expect_keyword(const char* kw) {
        Token t = lex_.next();
        if (t.kind != Tok::Ident || t.text != kw)
            throw parse_error(std::string("expected '") + kw + "'", t.line, t.col);
    }

    void expect(Tok kind, const char* what) {
        Token t = lex_.next();
        if (t.kind != kind)
            throw parse_error(std::string("expected ") + what, t.line, t.col);
    }

    Lexer lex_;
    std::vector<std::string> scope_;
};

} // namespace detail

/// Parse a program. Throws parse_error with position on syntax errors,
/// use-before-assign, unknown functions, and arity/type mistakes.
inline Program parse(std::string_view source) {
    detail::Parser parser(source);
    return parser.parse_program();
}

// ---------------------------------------------------------------------------
// Canonical printer. parse(print(p)) is structurally equal to p, and
// structurally equal programs print identically (names normalized to "f").

namespace detail {

enum class Prec { Expr = 0, Term = 1, Factor = 2 };

inline void print_expr(std::string& out, const ExprPtr& e, Prec min_prec);

inline void print_child(std::string& out, const ExprPtr& e, Prec child_prec, Prec min_prec) {
    if (child_prec < min_prec) {
        out += '(';
        print_expr(out, e, Prec::Expr);
        out += ')';
    } else {
        print_expr(out, e, min_prec);
    }
}

inline Prec prec_of(const ExprPtr& e) {
    switch (e->kind) {
    case ExprKind::Add:
    case ExprKind::Sub:
        return Prec::Expr;
    case ExprKind::ScalarOp:
        return e->scalar_op == ScalarOpKind::AddScalar ? Prec::Expr : Prec::Factor;
    case ExprKind::MatMul:
        return Prec::Term;
    default:
        return Prec::Factor;
    }
}

inline void print_expr(std::string& out, const ExprPtr& e, Prec min_prec) {
    switch (e->kind) {
    case ExprKind::Ref:
        out += e->name;
        return;
    case ExprKind::ScalarLit:
        out += format_number(e->value);
        return;
    case ExprKind::Identity:
        out += "eye(" + std::to_string(e->dim) + ")";
        return;
    case ExprKind::Invert:
        out += "inv(";
        print_expr(out, e->lhs, Prec::Expr);
        out += ')';
        return;
    case ExprKind::Transpose:
        out += "tr(";
        print_expr(out, e->lhs, Prec::Expr);
        out += ')';
        return;
    case ExprKind::Elementwise:
        out += unary_op_name(e->unary);
        out += '(';
        print_expr(out, e->lhs, Prec::Expr);
        out += ')';
        return;
    case ExprKind::Reduce:
        out += e->reduce == ReduceKind::RowMin ? "rowmin"
             : e->reduce == ReduceKind::Mean ? "mean" : "norm";
        out += '(';
        print_expr(out, e->lhs, Prec::Expr);
        out += ')';
        return;
    case ExprKind::MatMul:
        print_child(out, e->lhs, prec_of(e->lhs), Prec::Term);
        out += " @ ";
        print_child(out, e->rhs, prec_of(e->rhs), Prec::Factor);
        return;
    case ExprKind::Add:
    case ExprKind::Sub:
        print_child(out, e->lhs, prec_of(e->lhs), Prec::Expr);
        out += e->kind == ExprKind::Add ? " + " : " - ";
        print_child(out, e->rhs, prec_of(e->rhs), Prec::Term);
        return;
    case ExprKind::ScalarOp:
        switch (e->scalar_op) {
        case ScalarOpKind::Scale:
            out += format_number(e->value);
            out += " * ";
            print_child(out, e->lhs, prec_of(e->lhs), Prec::Factor);
            return;
        case ScalarOpKind::AddScalar:
            print_child(out, e->lhs, prec_of(e->lhs), Prec::Expr);
            if (e->value < 0.0) {
                out += " - ";
                out += format_number(-e->value);
            } else {
                out += " + ";
                out += format_number(e->value);
            }
            return;
        case ScalarOpKind::MaxScalar:
            out += "maxs(";
            print_expr(out, e->lhs, Prec::Expr);
            out += ", ";
            out += format_number(e->value);
            out += ')';
            return;
        }
        return;
    }
}

} // namespace detail

inline std::string print(const Program& p) {
    std::string out = "fn f(";
    for (std::size_t i = 0; i < p.signature.inputs.size(); ++i) {
        if (i)
            out += ", ";
        out += p.signature.inputs[i];
    }
    out += ") -> (";
    for (std::size_t i = 0; i < p.signature.outputs.size(); ++i) {
        if (i)
            out += ", ";
        out += p.signature.outputs[i];
    }
    out += ") {\n";
    for (const auto& stmt : p.statements) {
        out += "  " + stmt.target + " = ";
        detail::print_expr(out, stmt.expr, detail::Prec::Expr);
        out += '\n';
    }
    out += "}\n";
    return out;
}

/// FNV-1a hash of the canonical text; the candidate identity.
inline std::uint64_t program_hash(const Program& p) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : print(p)) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Validation

struct Violation {
    std::string code; // "signature", "scope", "unassigned-output", "size-budget", "constant"
    std::string message;
};

namespace detail {

inline void collect_constant_violations(const ExprPtr& e, std::vector<Violation>& out) {
    if (!e)
        return;
    if ((e->kind == ExprKind::ScalarLit || e->kind == ExprKind::ScalarOp) &&
        !std::isfinite(e->value))
        out.push_back({"constant", "non-finite scalar constant"});
    collect_constant_violations(e->lhs, out);
    collect_constant_violations(e->rhs, out);
}

inline void collect_refs(const ExprPtr& e, std::vector<std::string>& out) {
    if (!e)
        return;
    if (e->kind == ExprKind::Ref)
        out.push_back(e->name);
    collect_refs(e->lhs, out);
    collect_refs(e->rhs, out);
}

} // namespace detail

/// Check a program against a task signature. Returns violations instead
/// of raising; an empty list means the program is accepted.
inline std::vector<Violation> validate(const Program& p, const Signature& sig,
                                       const GuardConfig& guards = {}) {
    std::vector<Violation> out;
    if (p.signature.inputs != sig.inputs)
        out.push_back({"signature", "input names do not match the task signature"});
    if (p.signature.outputs != sig.outputs)
        out.push_back({"signature", "output names do not match the task signature"});

    if (p.statements.size() > guards.max_statements)
        out.push_back({"size-budget",
                       "program has " + std::to_string(p.statements.size()) +
                           " statements, budget is " + std::to_string(guards.max_statements)});

    std::vector<std::string> defined = p.signature.inputs;
    auto known = [&](const std::string& name) {
        for (const auto& n : defined)
            if (n == name)
                return true;
        return false;
    };
    for (const auto& stmt : p.statements) {
        std::vector<std::string> refs;
        detail::collect_refs(stmt.expr, refs);
        for (const auto& r : refs)
            if (!known(r))
                out.push_back({"scope", "use of '" + r + "' before assignment"});
        detail::collect_constant_violations(stmt.expr, out);
        if (!known(stmt.target))
            defined.push_back(stmt.target);
    }
    for (const auto& o : sig.outputs) {
        bool assigned = false;
        for (const auto& stmt : p.statements)
            if (stmt.target == o)
                assigned = true;
        if (!assigned)
            out.push_back({"unassigned-output", "output '" + o + "' is never assigned"});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Execution. Programs compile to a flat tape over value slots so the
// evaluation harness can run one statement stream per filter step
// without re-resolving names.

class Executor {
public:
    explicit Executor(const Program& p, const GuardConfig& guards = {}) : program_(p) {
        if (p.statements.size() > guards.max_statements)
            throw EvalError(EvalErrorKind::StepLimit, guards.max_statements,
                            "statement budget exceeded");
        for (const auto& name : p.signature.inputs)
            slot_of_name(name);
        for (std::size_t i = 0; i < p.statements.size(); ++i) {
            const auto& stmt = p.statements[i];
            const int dst = slot_of_name(stmt.target);
            compile(stmt.expr, dst, i);
        }
        for (const auto& name : p.signature.outputs) {
            auto it = names_.find(name);
            if (it == names_.end())
                throw EvalError(EvalErrorKind::MissingInput, 0,
                                "output '" + name + "' is never assigned");
            output_slots_.push_back(it->second);
        }
    }

    std::size_t num_inputs() const { return program_.signature.inputs.size(); }
    std::size_t num_outputs() const { return output_slots_.size(); }
    std::size_t num_slots() const { return next_slot_; }
    const Program& program() const { return program_; }

    /// Input i lives in slot i; read outputs via output_slot(j).
    int output_slot(std::size_t j) const { return output_slots_[j]; }

    /// Run the tape over caller-provided slots (inputs pre-filled).
    void run(std::vector<Matrix>& slots) const {
        for (const auto& ins : tape_) {
            try {
                exec(ins, slots);
            } catch (const singular_error& e) {
                throw EvalError(EvalErrorKind::Singular, ins.stmt, e.what());
            } catch (const nonfinite_error& e) {
                throw EvalError(EvalErrorKind::NonFinite, ins.stmt, e.what());
            } catch (const shape_error& e) {
                throw EvalError(EvalErrorKind::ShapeMismatch, ins.stmt, e.what());
            } catch (const domain_error& e) {
                throw EvalError(EvalErrorKind::ShapeMismatch, ins.stmt, e.what());
            }
        }
    }

private:
    enum class Op {
        MatMul, Add, Sub, Invert, Transpose, Elementwise,
        Scale, AddScalar, MaxScalar, RowMin, Mean, Norm, Eye, Copy, LoadScalar
    };

    struct Instruction {
        Op op;
        int a = -1;
        int b = -1;
        int dst = -1;
        double c = 0.0;
        UnaryOp unary{};
        std::size_t dim = 0;
        std::size_t stmt = 0;
    };

    int slot_of_name(const std::string& name) {
        auto it = names_.find(name);
        if (it != names_.end())
            return it->second;
        const int slot = next_slot_++;
        names_.emplace(name, slot);
        return slot;
    }

    int fresh_slot() { return next_slot_++; }

    int compile(const ExprPtr& e, int dst, std::size_t stmt) {
        Instruction ins;
        ins.dst = dst;
        ins.stmt = stmt;
        switch (e->kind) {
        case ExprKind::Ref:
            ins.op = Op::Copy;
            ins.a = slot_of_ref(e->name, stmt);
            break;
        case ExprKind::ScalarLit:
            ins.op = Op::LoadScalar;
            ins.c = e->value;
            break;
        case ExprKind::Identity:
            ins.op = Op::Eye;
            ins.dim = e->dim;
            break;
        case ExprKind::MatMul:
        case ExprKind::Add:
        case ExprKind::Sub:
            ins.op = e->kind == ExprKind::MatMul ? Op::MatMul
                   : e->kind == ExprKind::Add ? Op::Add : Op::Sub;
            ins.a = compile_operand(e->lhs, stmt);
            ins.b = compile_operand(e->rhs, stmt);
            break;
        case ExprKind::Invert:
            ins.op = Op::Invert;
            ins.a = compile_operand(e->lhs, stmt);
            break;
        case ExprKind::Transpose:
            ins.op = Op::Transpose;
            ins.a = compile_operand(e->lhs, stmt);
            break;
        case ExprKind::Elementwise:
            ins.op = Op::Elementwise;
            ins.unary = e->unary;
            ins.a = compile_operand(e->lhs, stmt);
            break;
        case ExprKind::ScalarOp:
            ins.op = e->scalar_op == ScalarOpKind::Scale ? Op::Scale
                   : e->scalar_op == ScalarOpKind::AddScalar ? Op::AddScalar : Op::MaxScalar;
            ins.c = e->value;
            ins.a = compile_operand(e->lhs, stmt);
            break;
        case ExprKind::Reduce:
            ins.op = e->reduce == ReduceKind::RowMin ? Op::RowMin
                   : e->reduce == ReduceKind::Mean ? Op::Mean : Op::Norm;
            ins.a = compile_operand(e->lhs, stmt);
            break;
        }
        tape_.push_back(ins);
        return dst;
    }

    // Refs feed straight from their slot; other operands go via a temp.
    int compile_operand(const ExprPtr& e, std::size_t stmt) {
        if (e->kind == ExprKind::Ref)
            return slot_of_ref(e->name, stmt);
        const int tmp = fresh_slot();
        compile(e, tmp, stmt);
        return tmp;
    }

    int slot_of_ref(const std::string& name, std::size_t stmt) const {
        auto it = names_.find(name);
        if (it == names_.end())
            throw EvalError(EvalErrorKind::MissingInput, stmt,
                            "use of '" + name + "' before assignment");
        return it->second;
    }

    void exec(const Instruction& ins, std::vector<Matrix>& slots) const {
        switch (ins.op) {
        case Op::MatMul: slots[ins.dst] = matmul(slots[ins.a], slots[ins.b]); break;
        case Op::Add: slots[ins.dst] = add(slots[ins.a], slots[ins.b]); break;
        case Op::Sub: slots[ins.dst] = sub(slots[ins.a], slots[ins.b]); break;
        case Op::Invert: slots[ins.dst] = invert(slots[ins.a]); break;
        case Op::Transpose: slots[ins.dst] = transpose(slots[ins.a]); break;
        case Op::Elementwise: slots[ins.dst] = elementwise(ins.unary, slots[ins.a]); break;
        case Op::Scale: slots[ins.dst] = scale(slots[ins.a], ins.c); break;
        case Op::AddScalar: slots[ins.dst] = add_scalar(slots[ins.a], ins.c); break;
        case Op::MaxScalar: slots[ins.dst] = max_with_scalar(slots[ins.a], ins.c); break;
        case Op::RowMin: slots[ins.dst] = row_min(slots[ins.a]); break;
        case Op::Mean: slots[ins.dst] = Matrix(1, 1, {mean_all(slots[ins.a])}); break;
        case Op::Norm: slots[ins.dst] = Matrix(1, 1, {frobenius_norm(slots[ins.a])}); break;
        case Op::Eye: slots[ins.dst] = Matrix::identity(ins.dim); break;
        case Op::Copy: slots[ins.dst] = slots[ins.a]; break;
        case Op::LoadScalar: slots[ins.dst] = Matrix(1, 1, {ins.c}); break;
        }
    }

    Program program_;
    std::map<std::string, int> names_;
    int next_slot_ = 0;
    std::vector<Instruction> tape_;
    std::vector<int> output_slots_;
};

using Env = std::map<std::string, Matrix>;

/// Execute statements in order over the given input bindings. Returns a
/// binding for every declared output; raises EvalError with the failing
/// statement index on singularity, non-finite values, shape mismatches,
/// or a blown statement budget.
inline Env interpret(const Program& p, const Env& env, const GuardConfig& guards = {}) {
    Executor ex(p, guards);
    std::vector<Matrix> slots(ex.num_slots());
    for (std::size_t i = 0; i < p.signature.inputs.size(); ++i) {
        auto it = env.find(p.signature.inputs[i]);
        if (it == env.end())
            throw EvalError(EvalErrorKind::MissingInput, 0,
                            "input '" + p.signature.inputs[i] + "' is not bound");
        slots[i] = it->second;
    }
    ex.run(slots);
    Env out;
    for (std::size_t j = 0; j < p.signature.outputs.size(); ++j)
        out[p.signature.outputs[j]] = slots[ex.output_slot(j)];
    return out;
}

} // namespace evofilter::dsl
