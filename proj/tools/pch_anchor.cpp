// Gives the shared precompiled header a translation unit to live in.
namespace cmi::detail {
int pch_anchor = 0;
}  // namespace cmi::detail
