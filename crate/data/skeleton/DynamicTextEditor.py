from tkinter import *
from tkinter import filedialog, messagebox


class DynamicTextEditor(Frame):
    def __init__(self, master, controller):
        super().__init__(master)
        self.master = master
        self.controller = controller
        self.initUI()

    def initUI(self):
        self.master.title("Dynamic Text Editor")
        self.pack(fill=BOTH, expand=True)

        menubar = Menu(self.master)
        self.master.config(menu=menubar)

        file_menu = Menu(menubar, tearoff=0)
        file_menu.add_command(label="New", command=lambda: self.controller("new_file", self))
        file_menu.add_command(label="Open", command=lambda: self.controller("open_file", self))
        file_menu.add_command(label="Save", command=lambda: self.controller("save_file", self))
        file_menu.add_separator()
        file_menu.add_command(label="Exit", command=self.master.quit)
        menubar.add_cascade(label="File", menu=file_menu)

        self.text = Text(self, wrap=WORD, undo=True)
        self.text.pack(fill=BOTH, expand=True)


def main(controller):
    root = Tk()
    root.geometry("640x480")
    DynamicTextEditor(root, controller)
    root.mainloop()
