#pragma once

namespace stitch {

const char* git_describe();

}  // namespace stitch
